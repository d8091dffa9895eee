import dataclasses
import math

import numpy as np
import pandas as pd
import pytest

import experiments
from experiments import ExperimentConfig, ExperimentException, ResultRow
from lab_constants import LabValidationException, ModelKind, Scenario, ShiftKind


def _tiny(**kw) -> ExperimentConfig:
    base = dict(
        scenario=Scenario.PROBLEM_SCALE, sweep=[12, 20], n_seeds=2,
        models=[ModelKind.MODEL_A, ModelKind.MODEL_B], n_problems=20, n_algos=3, dim=2, max_depth=3, L_max=8,
        iterations=5, n_runs=2, epochs=5, width=0.25,
    )
    base.update(kw)
    return ExperimentConfig(**base)

def _row(model: str, value: float, seed: int, error_T: float, scenario: str = "problem_scale") -> ResultRow:
    return ResultRow(scenario, value, model, seed, 0.0, error_T, error_T, None, None, False, 0.1)

def _stable(rows):
    return [dataclasses.replace(r, wall_time_s=0.0) for r in rows]


# ----------------------------
# planning
# ----------------------------

def test_model_complexity_cardinality():
    cfg = ExperimentConfig(Scenario.MODEL_COMPLEXITY, [0.25, 0.5, 1.0, 2.0], n_seeds=5, n_algos=5, n_new=3)
    keys = [k for s in range(cfg.n_seeds) for k in experiments.planned_keys(cfg, s)]
    assert len(keys) == len(set(keys)) == 4 * 4 * 5
    assert {k[2] for k in keys} == {"ModelB", "ModelB@problem", "ModelB@algo", "ModelB@both"}
    assert [p.width for p in cfg.points()] == [0.25, 0.5, 1.0, 2.0]
    assert cfg.universe_size() == 8

def test_series_per_scenario():
    scale = [c.series for c in experiments.conditions(_tiny())]
    assert scale == ["ModelA", "ModelB"]
    under_shift = ExperimentConfig(Scenario.SCALE_UNDER_SHIFT, [100], n_algos=5, n_new=2)
    assert [c.series for c in experiments.conditions(under_shift)] == \
        ["ModelA", "ModelB", "ModelB@problem", "ModelB@algo", "ModelB@both"]
    shift = ExperimentConfig(Scenario.DIST_SHIFT, [0, 1, 2, 3], n_algos=5, shift_kind=ShiftKind.ALGO)
    assert {c.series for c in experiments.conditions(shift)} == {"ModelA@algo", "ModelB@algo", "ModelReg@algo", "ModelCla@algo"}
    assert [p.n_new for p in shift.points()] == [0, 1, 2, 3]
    assert shift.universe_size() == 8

def test_problem_shift_sweep_points():
    cfg = ExperimentConfig(Scenario.DIST_SHIFT, [0.0, 0.3, 0.6], shift_kind=ShiftKind.PROBLEM)
    assert [p.fraction for p in cfg.points()] == [0.0, 0.3, 0.6]
    assert all(p.n_new == 0 for p in cfg.points())

@pytest.mark.parametrize("kw", [
    dict(sweep=[]),
    dict(n_seeds=0),
    dict(models=[]),
    dict(eta=1.0),
    dict(sweep=[1]),
    dict(scenario=Scenario.ALGO_SCALE, sweep=[70]),
    dict(scenario=Scenario.DIST_SHIFT, shift_kind=ShiftKind.BOTH, sweep=[1]),
    dict(scenario=Scenario.DIST_SHIFT, shift_kind=ShiftKind.PROBLEM, sweep=[1.5]),
])
def test_invalid_configs_rejected(kw):
    with pytest.raises(LabValidationException):
        _tiny(**kw)


# ----------------------------
# rows and summary
# ----------------------------

def test_result_row_record_round_trip():
    row = ResultRow("dist_shift", 2.0, "ModelB@algo", 3, 0.25, 0.5, 0.25, None, math.inf, True, 1.5)
    rec = row.to_record()
    assert rec["sweep_value"] == "2"
    assert rec["bound"] == ""
    assert rec["fallback"] == "true"
    assert ResultRow.from_record(rec) == row
    assert row.key == ("dist_shift", "2", "ModelB@algo", 3)
    with pytest.raises(LabValidationException):
        ResultRow.from_record({**rec, "seed": "x"})

def test_summary_statistics():
    rows = [_row("ModelB", 100, 0, 0.1), _row("ModelB", 100, 1, 0.3), _row("ModelB", 200, 0, 0.05), _row("ModelB", 200, 1, 0.05)]
    summary = experiments.summarize(rows)
    t = summary.table.set_index("sweep_value")
    assert t.loc[100.0, "n"] == 2
    assert t.loc[100.0, "accuracy_mean"] == pytest.approx(0.8)
    assert t.loc[100.0, "accuracy_std"] == pytest.approx(0.1414, abs=1e-4)
    assert t.loc[200.0, "accuracy_std"] == 0.0
    assert math.isnan(t.loc[100.0, "bound_mean"])

def test_single_seed_has_zero_spread():
    summary = experiments.summarize([_row("ModelA", 10, 0, 0.2)])
    assert summary.table["accuracy_std"].tolist() == [0.0]
    assert math.isnan(summary.trends["ModelA"])

def test_increasing_accuracy_has_unit_rank_correlation():
    rows = [_row(m, v, 0, e) for m in ("ModelA", "ModelCla") for v, e in ((10, 0.5), (20, 0.4), (40, 0.2), (80, 0.1))]
    trends = experiments.summarize(rows).trends
    assert trends == {"ModelA": pytest.approx(1.0), "ModelCla": pytest.approx(1.0)}

def test_spearman_uses_ranks_only():
    x = pd.Series([1.0, 2.0, 3.0, 4.0, 5.0])
    assert experiments.spearman(x, x ** 3) == pytest.approx(1.0)
    assert experiments.spearman(x, -np.exp(x)) == pytest.approx(-1.0)
    assert experiments.spearman(x, pd.Series([0.1, 0.3, 0.2, 0.5, 0.4])) == pytest.approx(0.8)
    assert math.isnan(experiments.spearman(x, pd.Series([0.3] * 5)))
    assert math.isnan(experiments.spearman(x[:1], x[:1]))

def test_summary_input_checks():
    with pytest.raises(LabValidationException):
        experiments.summarize([])
    with pytest.raises(LabValidationException):
        experiments.summarize([_row("ModelA", 1, 0, 0.1), _row("ModelA", 1, 0, 0.1, scenario="algo_scale")])


# ----------------------------
# running
# ----------------------------

def test_tiny_run_is_complete_and_deterministic():
    cfg = _tiny()
    rows = experiments.run_experiment(cfg)
    assert sorted(r.key for r in rows) == sorted(k for s in range(2) for k in experiments.planned_keys(cfg, s))
    for r in rows:
        assert 0.0 <= r.error_S <= 1.0 and 0.0 <= r.error_T <= 1.0
        assert r.gap == pytest.approx(r.error_T - r.error_S)
        assert r.bound is not None and r.bound >= r.error_S
        assert r.chi2 is None and not r.fallback
    again = experiments.run_experiment(cfg, jobs=2)
    assert _stable(again) == _stable(rows)

def test_resume_skips_finished_cells():
    cfg = _tiny()
    full = experiments.run_experiment(cfg)
    done = [r.key for r in full if r.seed == 0]
    seen = []
    rest = experiments.run_experiment(cfg, existing=done, on_row=seen.append)
    assert {r.seed for r in rest} == {1}
    assert _stable(rest) == _stable([r for r in full if r.seed == 1])
    assert seen == rest
    assert experiments.run_experiment(cfg, existing=[r.key for r in full]) == []

def test_algorithm_shift_run_marks_fallback():
    cfg = _tiny(scenario=Scenario.DIST_SHIFT, sweep=[0, 1], n_seeds=1, shift_kind=ShiftKind.ALGO, smoothing_eps=0.01)
    rows = {(r.model, r.sweep_value): r for r in experiments.run_experiment(cfg)}
    assert not rows[("ModelA@algo", 0.0)].fallback
    assert rows[("ModelA@algo", 1.0)].fallback
    assert not rows[("ModelB@algo", 1.0)].fallback
    assert 0.0 <= rows[("ModelB@algo", 0.0)].chi2 < rows[("ModelB@algo", 1.0)].chi2
    assert rows[("ModelB@algo", 1.0)].bound is not None

def test_unsmoothed_algorithm_shift_has_no_finite_bound():
    cfg = _tiny(scenario=Scenario.DIST_SHIFT, sweep=[1], n_seeds=1, models=[ModelKind.MODEL_B], shift_kind=ShiftKind.ALGO)
    row, = experiments.run_experiment(cfg)
    assert math.isinf(row.chi2)
    assert row.bound is None

def test_failing_cell_is_reported_with_its_coordinates():
    cfg = _tiny(scenario=Scenario.MODEL_COMPLEXITY, sweep=[3.0], n_seeds=1, n_new=1)
    with pytest.raises(ExperimentException) as info:
        experiments.run_experiment(cfg)
    assert info.value.cell == ("model_complexity", "3", "ModelB", 0)
    assert "sweep_value=3" in str(info.value)


# ----------------------------
# acceptance trends (long)
# ----------------------------

@pytest.mark.slow
def test_accuracy_grows_with_training_problems():
    cfg = ExperimentConfig(Scenario.PROBLEM_SCALE, [500, 1000, 2000, 4000], n_seeds=5, n_algos=10)
    summary = experiments.summarize(experiments.run_experiment(cfg, jobs=4))
    for model in ("ModelA", "ModelB", "ModelReg", "ModelCla"):
        assert summary.trends[model] >= 0.8
    last = summary.table[summary.table["sweep_value"] == 4000].set_index("model")["accuracy_mean"]
    assert last["ModelA"] >= last["ModelCla"]
    assert last["ModelB"] >= last["ModelCla"]

@pytest.mark.slow
def test_pair_model_degrades_least_under_new_algorithms():
    cfg = ExperimentConfig(Scenario.DIST_SHIFT, [0, 1, 2, 3], n_seeds=5, n_algos=5, shift_kind=ShiftKind.ALGO)
    table = experiments.summarize(experiments.run_experiment(cfg, jobs=4)).table
    acc = table.pivot(index="sweep_value", columns="model", values="accuracy_mean")
    at3 = acc.loc[3.0]
    assert at3["ModelB@algo"] > at3["ModelA@algo"]
    assert at3["ModelB@algo"] > at3["ModelCla@algo"]
    drop = acc.loc[0.0] - acc.loc[3.0]
    assert drop.idxmin() == "ModelB@algo"
