# render.py
import os
os.environ["PYGAME_HIDE_SUPPORT_PROMPT"] = "hide"

import logging
from dataclasses import dataclass
from typing import List, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pygame

from lab_constants import LabValidationException, Scenario
from experiments import ResultRow, summarize

logger = logging.getLogger("PLOT")


class PlotException(LabValidationException):
    pass


X_LABELS = {
    Scenario.PROBLEM_SCALE.value: "training problems |S_P|",
    Scenario.ALGO_SCALE.value: "training algorithms |S_A|",
    Scenario.DIST_SHIFT.value: "shift amount",
    Scenario.SCALE_UNDER_SHIFT.value: "training problems |S_P|",
    Scenario.MODEL_COMPLEXITY.value: "width multiplier k",
}

METRICS = {
    "accuracy": ("accuracy_mean", "accuracy_std", "test accuracy"),
    "gap": ("gap_mean", "gap_std", "generalization gap"),
}


# ----------------------------
# Series
# ----------------------------

@dataclass
class Series:
    name: str
    x: List[float]
    y: List[float]
    err: List[float]


def chart_series(rows: List[ResultRow], scenario: str, metric: str = "accuracy") -> List[Series]:
    '''one series per model, points sorted by sweep value'''
    if metric not in METRICS:
        raise PlotException(f'Unknown metric "{metric}"')
    rows = [r for r in rows if r.scenario == scenario]
    if not rows:
        raise PlotException(f'No rows for scenario "{scenario}"')
    mean_col, std_col, _ = METRICS[metric]
    table = summarize(rows).table
    out = []
    for name, part in table.groupby("model", sort=True):
        part = part.sort_values("sweep_value")
        out.append(Series(str(name), part["sweep_value"].tolist(), part[mean_col].tolist(), part[std_col].tolist()))
    return out


# ----------------------------
# SVG
# ----------------------------

SVG_RC = {
    "svg.hashsalt": "alsel-lab",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def write_svg(rows: List[ResultRow], scenario: str, path: str, metric: str = "accuracy") -> str:
    '''line chart with stddev error bars; byte-identical output for identical rows'''
    series = chart_series(rows, scenario, metric)
    _, _, y_label = METRICS[metric]
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        for s in series:
            style = "-o" if len(s.x) > 1 else "o"
            ax.errorbar(s.x, s.y, yerr=s.err, fmt=style, capsize=3, label=s.name)
        ax.set_xlabel(X_LABELS.get(scenario, "sweep value"))
        ax.set_ylabel(y_label)
        ax.set_title(scenario)
        ax.grid(True, linestyle="--", alpha=0.5)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.info(f"wrote {path} ({len(series)} series)")
    return path


# ----------------------------
# pygame preview
# ----------------------------

@dataclass
class ChartConfig:
    width: int = 760
    height: int = 480
    margin: int = 56
    legend_width: int = 150
    point_radius: int = 4


SERIES_COLORS: List[Tuple[int, int, int]] = [
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
]

TEXT_COLOR = (15, 15, 15)
BG_COLOR = (250, 250, 250)
AXIS_COLOR = (60, 60, 60)
GRID_COLOR = (215, 215, 215)


class ChartRenderer:
    '''draws the same series as write_svg into a pygame surface (window or off-screen)'''
    def __init__(self, series: List[Series], title: str, cfg: ChartConfig = ChartConfig()):
        if not series:
            raise PlotException("Nothing to draw")
        self.series = series
        self.title = title
        self.cfg = cfg
        self._inited = False
        self.screen = None

    def init(self, window: bool = True):
        pygame.init()
        if window:
            pygame.display.set_caption(f"alsel-lab: {self.title}")
            self.screen = pygame.display.set_mode((self.cfg.width, self.cfg.height))
        else:
            self.screen = pygame.Surface((self.cfg.width, self.cfg.height))
        self._font = pygame.font.SysFont("Arial", 14)
        self.clock = pygame.time.Clock()
        self._inited = True

    def _ranges(self) -> Tuple[float, float, float, float]:
        xs = [x for s in self.series for x in s.x]
        lows = [y - e for s in self.series for y, e in zip(s.y, s.err)]
        highs = [y + e for s in self.series for y, e in zip(s.y, s.err)]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(lows), max(highs)
        if x1 == x0:
            x0, x1 = x0 - 1.0, x1 + 1.0
        if y1 == y0:
            y0, y1 = y0 - 0.05, y1 + 0.05
        return x0, x1, y0, y1

    def _to_px(self, x: float, y: float, ranges) -> Tuple[int, int]:
        x0, x1, y0, y1 = ranges
        c = self.cfg
        plot_w = c.width - 2 * c.margin - c.legend_width
        plot_h = c.height - 2 * c.margin
        px = c.margin + (x - x0) / (x1 - x0) * plot_w
        py = c.margin + (1.0 - (y - y0) / (y1 - y0)) * plot_h
        return int(round(px)), int(round(py))

    def _draw_text(self, text: str, x: int, y: int, color=TEXT_COLOR):
        self.screen.blit(self._font.render(text, True, color), (x, y))

    def draw(self):
        if not self._inited:
            self.init(window=False)
        c = self.cfg
        ranges = self._ranges()
        self.screen.fill(BG_COLOR)
        left, top = c.margin, c.margin
        right, bottom = c.width - c.margin - c.legend_width, c.height - c.margin

        for i in range(5):
            gy = top + i * (bottom - top) // 4
            pygame.draw.line(self.screen, GRID_COLOR, (left, gy), (right, gy), 1)
            value = ranges[3] - i * (ranges[3] - ranges[2]) / 4
            self._draw_text(f"{value:.2f}", 4, gy - 8)
        pygame.draw.line(self.screen, AXIS_COLOR, (left, bottom), (right, bottom), 2)
        pygame.draw.line(self.screen, AXIS_COLOR, (left, top), (left, bottom), 2)
        self._draw_text(self.title, left, 8)
        self._draw_text(f"{ranges[0]:g}", left, bottom + 6)
        self._draw_text(f"{ranges[1]:g}", right - 24, bottom + 6)

        for idx, s in enumerate(self.series):
            color = SERIES_COLORS[idx % len(SERIES_COLORS)]
            pts = [self._to_px(x, y, ranges) for x, y in zip(s.x, s.y)]
            if len(pts) > 1:
                pygame.draw.lines(self.screen, color, False, pts, 2)
            for (px, py), x, y, e in zip(pts, s.x, s.y, s.err):
                if e > 0:
                    _, top_px = self._to_px(x, y + e, ranges)
                    _, bot_px = self._to_px(x, y - e, ranges)
                    pygame.draw.line(self.screen, color, (px, top_px), (px, bot_px), 1)
                pygame.draw.circle(self.screen, color, (px, py), c.point_radius)
            ly = top + 20 * idx
            pygame.draw.rect(self.screen, color, pygame.Rect(right + 16, ly + 4, 12, 12))
            self._draw_text(s.name, right + 34, ly)
        return self.screen

    def save_png(self, path: str) -> str:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        pygame.image.save(self.draw(), path)
        logger.info(f"wrote {path}")
        return path

    def render_once(self, *, fps_cap: int = 30) -> bool:
        '''
        Draw one frame in the window. Returns False if user closed window.
        '''
        if not self._inited:
            self.init(window=True)
        for event in pygame.event.get():
            if event.type == pygame.QUIT:
                return False
        self.draw()
        pygame.display.flip()
        self.clock.tick(fps_cap)
        return True

    def close(self):
        pygame.quit()


def scenarios_in(rows: List[ResultRow]) -> List[str]:
    return sorted({r.scenario for r in rows})
