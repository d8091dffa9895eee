import os
os.environ.setdefault("SDL_VIDEODRIVER", "dummy")

import pygame
import pytest

import render
from experiments import ResultRow
from render import ChartRenderer, PlotException, Series


def _rows():
    rows = []
    for model, base in (("ModelA", 0.3), ("ModelB", 0.2)):
        for value in (100, 200, 400):
            for seed in (0, 1):
                err = base - value / 4000 + 0.01 * seed
                rows.append(ResultRow("problem_scale", float(value), model, seed, err / 2, err, err / 2, 0.9, None, False, 0.1))
    rows.append(ResultRow("algo_scale", 5.0, "ModelB", 0, 0.1, 0.2, 0.1, None, None, False, 0.1))
    return rows


def test_one_series_per_model_sorted_by_sweep():
    series = render.chart_series(list(reversed(_rows())), "problem_scale")
    assert [s.name for s in series] == ["ModelA", "ModelB"]
    a = series[0]
    assert a.x == [100.0, 200.0, 400.0]
    assert a.y == pytest.approx([1 - (0.3 - v / 4000 + 0.005) for v in (100, 200, 400)])
    assert all(e == pytest.approx(0.00707, abs=1e-4) for e in a.err)

def test_gap_metric():
    series = render.chart_series(_rows(), "problem_scale", metric="gap")
    assert series[1].y[0] == pytest.approx((0.2 - 0.025 + 0.005) / 2)

def test_bad_requests_rejected():
    with pytest.raises(PlotException):
        render.chart_series(_rows(), "dist_shift")
    with pytest.raises(PlotException):
        render.chart_series(_rows(), "problem_scale", metric="loss")
    with pytest.raises(PlotException):
        ChartRenderer([], "empty")

def test_scenarios_in():
    assert render.scenarios_in(_rows()) == ["algo_scale", "problem_scale"]

def test_svg_is_byte_identical(tmp_path):
    a = render.write_svg(_rows(), "problem_scale", str(tmp_path / "a.svg"))
    b = render.write_svg(_rows(), "problem_scale", str(tmp_path / "sub" / "b.svg"))
    with open(a, "rb") as fa, open(b, "rb") as fb:
        data = fa.read()
        assert data == fb.read()
    assert b"ModelA" in data and b"ModelB" in data

def test_single_point_series_still_renders(tmp_path):
    path = render.write_svg(_rows(), "algo_scale", str(tmp_path / "one.svg"))
    assert os.path.getsize(path) > 0


# ----------------------------
# pygame preview
# ----------------------------

def test_png_has_configured_size(tmp_path):
    series = render.chart_series(_rows(), "problem_scale")
    chart = ChartRenderer(series, "problem_scale", render.ChartConfig(width=400, height=300))
    try:
        path = chart.save_png(str(tmp_path / "chart.png"))
        image = pygame.image.load(path)
        assert image.get_size() == (400, 300)
        assert image.get_at((1, 1))[:3] == render.BG_COLOR
    finally:
        chart.close()

def test_flat_series_do_not_divide_by_zero():
    chart = ChartRenderer([Series("ModelB", [5.0], [0.5], [0.0])], "flat")
    try:
        surface = chart.draw()
        assert surface.get_size() == (chart.cfg.width, chart.cfg.height)
    finally:
        chart.close()

def test_render_once_draws_a_frame():
    chart = ChartRenderer(render.chart_series(_rows(), "problem_scale"), "problem_scale")
    try:
        assert chart.render_once(fps_cap=0)
    finally:
        chart.close()
