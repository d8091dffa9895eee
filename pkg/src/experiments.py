"""
Seeded one-factor sweeps over the selector families.

For every seed a "world" is built once at the largest sweep size: an algorithm
universe, a training problem pool per training generator, one test pool from the
base generator and the performance matrix over all of them. Sweep points take
prefixes of those pools, so smaller points are nested in larger ones and
labelling runs once per seed and generator.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from lab_constants import LabConstants, LabException, LabRuntimeException, LabValidationException, ModelKind, Scenario, ShiftKind
from bounds import bound_for_model
from distshift import GenerativeConfig, algo_weights_for, apply_algo_shift, apply_problem_shift, chi2_categorical, chi2_joint, chi2_problem_mc
from expression import OperatorTable, ProblemInstance, generate_problems
from labeling import DataSplit, PerformanceMatrix, label
from metaheuristics import AlgorithmSpec, make_portfolio
from selector_models import SelectionData, SelectorModel, TrainHyper, bindings_for, bound_inputs, build, evaluate, fit
from seeding import derive_seed, parallel_imap

logger = logging.getLogger("EXPERIMENT")

TEST_ID_OFFSET = 1_000_000

RESULT_COLUMNS = ["scenario", "sweep_value", "model", "seed", "error_S", "error_T", "gap", "bound", "chi2", "fallback", "wall_time_s"]


class ExperimentException(LabRuntimeException):
    '''a component failed inside one cell; the cell is kept for the message'''
    def __init__(self, cell: Tuple, cause: BaseException):
        self.cell = cell
        self.cause = cause
        scenario, value, series, seed = cell
        super().__init__(f"cell scenario={scenario} sweep_value={value} model={series} seed={seed} failed: {cause}")

    def __reduce__(self):
        return (ExperimentException, (self.cell, self.cause))


@dataclass
class ExperimentConfig:
    scenario: Scenario
    sweep: List[float]
    n_seeds: int = 5
    master_seed: int = 0
    models: List[ModelKind] = field(default_factory=lambda: list(ModelKind))
    n_problems: int = 1000
    n_algos: int = 10
    eta: float = LabConstants.DEFAULT_ETA
    dim: int = LabConstants.DEFAULT_DIM
    max_depth: int = LabConstants.DEFAULT_MAX_DEPTH
    L_max: int = LabConstants.DEFAULT_L_MAX
    iterations: int = LabConstants.DEFAULT_ITERATIONS
    n_runs: int = LabConstants.DEFAULT_N_RUNS
    epochs: int = LabConstants.DEFAULT_EPOCHS
    lr: float = LabConstants.DEFAULT_LR
    width: float = 1.0
    shift_kind: ShiftKind = ShiftKind.ALGO  #dist_shift only
    shift_fraction: float = 0.3
    shift_scale: float = LabConstants.SHIFT_SCALE
    n_new: int = 3
    n_mc: int = LabConstants.DEFAULT_MC_DRAWS
    smoothing_eps: float = 0.0
    gamma_margin: float = LabConstants.GAMMA_MARGIN
    delta: float = LabConstants.DELTA
    operator_table: OperatorTable = field(default_factory=OperatorTable.default)

    def __post_init__(self):
        if not self.sweep:
            raise LabValidationException("Experiment sweep must not be empty")
        if self.n_seeds < 1:
            raise LabValidationException(f"n_seeds must be >= 1, got {self.n_seeds}")
        if not self.models:
            raise LabValidationException("Experiment needs at least one model")
        if not 0.0 < self.eta < 1.0:
            raise LabValidationException(f"eta must be in (0, 1), got {self.eta}")
        if self.scenario is Scenario.DIST_SHIFT and self.shift_kind not in (ShiftKind.ALGO, ShiftKind.PROBLEM):
            raise LabValidationException('dist_shift needs shift_kind "algo" or "problem"')
        self.sweep = [float(v) for v in self.sweep]
        for p in self.points():
            if p.n_problems < 2 or p.n_algos < 1:
                raise LabValidationException(f"Sweep value {p.value} gives an empty training set")
            if p.n_new < 0 or not 0.0 <= p.fraction <= 1.0:
                raise LabValidationException(f"Sweep value {p.value} is out of range for {self.scenario.value}")
        if self.universe_size() > LabConstants.MAX_PORTFOLIO:
            raise LabValidationException(f"Experiment needs {self.universe_size()} algorithms, more than {LabConstants.MAX_PORTFOLIO}")

    def points(self) -> List["SweepPoint"]:
        return [sweep_point(self, v) for v in self.sweep]

    def universe_size(self) -> int:
        needs_new = self.scenario in (Scenario.SCALE_UNDER_SHIFT, Scenario.MODEL_COMPLEXITY) or \
            (self.scenario is Scenario.DIST_SHIFT and self.shift_kind is ShiftKind.ALGO)
        return max(p.n_algos + (p.n_new if needs_new else 0) for p in self.points())


class SweepPoint(NamedTuple):
    value: float
    n_problems: int
    n_algos: int
    width: float
    n_new: int
    fraction: float


def sweep_point(cfg: ExperimentConfig, value: float) -> SweepPoint:
    s = cfg.scenario
    if s is Scenario.PROBLEM_SCALE:
        return SweepPoint(value, int(value), cfg.n_algos, cfg.width, 0, 0.0)
    if s is Scenario.ALGO_SCALE:
        return SweepPoint(value, cfg.n_problems, int(value), cfg.width, 0, 0.0)
    if s is Scenario.DIST_SHIFT:
        if cfg.shift_kind is ShiftKind.ALGO:
            return SweepPoint(value, cfg.n_problems, cfg.n_algos, cfg.width, int(value), 0.0)
        return SweepPoint(value, cfg.n_problems, cfg.n_algos, cfg.width, 0, value)
    if s is Scenario.SCALE_UNDER_SHIFT:
        return SweepPoint(value, int(value), cfg.n_algos, cfg.width, cfg.n_new, cfg.shift_fraction)
    return SweepPoint(value, cfg.n_problems, cfg.n_algos, value, cfg.n_new, cfg.shift_fraction)


class Condition(NamedTuple):
    kind: ModelKind
    shift: ShiftKind

    @property
    def series(self) -> str:
        if self.shift is ShiftKind.NONE:
            return self.kind.kind_name
        return f"{self.kind.kind_name}@{self.shift.value}"

    @property
    def problem_shift(self) -> bool:
        return self.shift in (ShiftKind.PROBLEM, ShiftKind.BOTH)

    @property
    def algo_shift(self) -> bool:
        return self.shift in (ShiftKind.ALGO, ShiftKind.BOTH)


def conditions(cfg: ExperimentConfig) -> List[Condition]:
    '''the plotted series of a scenario'''
    if cfg.scenario in (Scenario.PROBLEM_SCALE, Scenario.ALGO_SCALE):
        return [Condition(k, ShiftKind.NONE) for k in cfg.models]
    if cfg.scenario is Scenario.DIST_SHIFT:
        return [Condition(k, cfg.shift_kind) for k in cfg.models]
    B = ModelKind.MODEL_B
    shifted = [Condition(B, ShiftKind.NONE), Condition(B, ShiftKind.PROBLEM), Condition(B, ShiftKind.ALGO), Condition(B, ShiftKind.BOTH)]
    if cfg.scenario is Scenario.SCALE_UNDER_SHIFT:
        return [Condition(ModelKind.MODEL_A, ShiftKind.NONE)] + shifted
    return shifted


def format_sweep(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


# -----------------------
# Rows
# -----------------------

@dataclass
class ResultRow:
    scenario: str
    sweep_value: float
    model: str
    seed: int
    error_S: float
    error_T: float
    gap: float
    bound: Optional[float]
    chi2: Optional[float]
    fallback: bool
    wall_time_s: float

    @property
    def key(self) -> Tuple[str, str, str, int]:
        return (self.scenario, format_sweep(self.sweep_value), self.model, self.seed)

    @property
    def accuracy(self) -> float:
        return 1.0 - self.error_T

    def to_record(self) -> Dict[str, str]:
        def num(v: Optional[float]) -> str:
            return "" if v is None else repr(float(v))
        return {
            "scenario": self.scenario,
            "sweep_value": format_sweep(self.sweep_value),
            "model": self.model,
            "seed": str(self.seed),
            "error_S": num(self.error_S),
            "error_T": num(self.error_T),
            "gap": num(self.gap),
            "bound": num(self.bound),
            "chi2": num(self.chi2),
            "fallback": "true" if self.fallback else "false",
            "wall_time_s": num(self.wall_time_s),
        }

    @classmethod
    def from_record(cls, rec: Dict[str, str]) -> "ResultRow":
        def opt(v: str) -> Optional[float]:
            return None if v == "" else float(v)
        try:
            return cls(rec["scenario"], float(rec["sweep_value"]), rec["model"], int(rec["seed"]),
                       float(rec["error_S"]), float(rec["error_T"]), float(rec["gap"]),
                       opt(rec["bound"]), opt(rec["chi2"]), rec["fallback"] == "true", float(rec["wall_time_s"]))
        except (KeyError, ValueError) as e:
            raise LabValidationException(f"Malformed result row {rec}: {e}") from e


def planned_keys(cfg: ExperimentConfig, seed: int) -> List[Tuple[str, str, str, int]]:
    return [(cfg.scenario.value, format_sweep(p.value), c.series, seed) for p in cfg.points() for c in conditions(cfg)]


# -----------------------
# Per-seed world
# -----------------------

class _Pool(NamedTuple):
    problems: List[ProblemInstance]
    perf: PerformanceMatrix


class _World:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        points = cfg.points()
        self.max_train = max(p.n_problems for p in points)
        self.max_test = max(_n_test(cfg, p.n_problems) for p in points)
        self.universe: List[AlgorithmSpec] = make_portfolio(cfg.universe_size(), self._seed("portfolio"), cfg.iterations)
        self.universe_ids = [a.id for a in self.universe]
        self.test = self._pool(cfg.operator_table, self.max_test, TEST_ID_OFFSET, self._seed("test"))
        self._train: Dict[float, _Pool] = {}
        self._chi2_problem: Dict[float, float] = {}
        self._data: Dict[float, SelectionData] = {}
        self._perf: Dict[float, PerformanceMatrix] = {}

    def _seed(self, *parts) -> int:
        return derive_seed(self.cfg.master_seed, self.seed, *parts)

    def _pool(self, table: OperatorTable, n: int, first_id: int, seed: int) -> _Pool:
        cfg = self.cfg
        problems = generate_problems(table, n, cfg.dim, cfg.max_depth, seed, first_id=first_id,
                                     vocab=cfg.operator_table, L_max=cfg.L_max)
        perf = label(problems, self.universe, cfg.n_runs, self._seed("label"))
        return _Pool(problems, perf)

    def training_table(self, fraction: float) -> OperatorTable:
        if fraction <= 0:
            return self.cfg.operator_table
        return apply_problem_shift(self.cfg.operator_table, fraction, self.cfg.shift_scale, self._seed("shift"))

    def train_pool(self, fraction: float) -> _Pool:
        if fraction not in self._train:
            tag = format_sweep(fraction)
            self._train[fraction] = self._pool(self.training_table(fraction), self.max_train, 0, self._seed("train", tag))
            pool = self._train[fraction]
            self._perf[fraction] = PerformanceMatrix(
                pool.perf.problem_ids + self.test.perf.problem_ids, self.universe_ids,
                np.vstack([pool.perf.mean_best, self.test.perf.mean_best]), self.cfg.n_runs,
            )
            self._data[fraction] = SelectionData.from_instances(pool.problems + self.test.problems, self.universe)
        return self._train[fraction]

    def perf(self, fraction: float) -> PerformanceMatrix:
        self.train_pool(fraction)
        return self._perf[fraction]

    def data(self, fraction: float) -> SelectionData:
        self.train_pool(fraction)
        return self._data[fraction]

    def chi2_problem(self, fraction: float) -> float:
        '''test generator = base table, training generator = shifted table'''
        if fraction <= 0:
            return 0.0
        if fraction not in self._chi2_problem:
            cfg = self.cfg
            weights = {a: 1.0 for a in self.universe_ids}
            P_T = GenerativeConfig(cfg.operator_table, weights, cfg.dim, cfg.max_depth)
            P_S = GenerativeConfig(self.training_table(fraction), weights, cfg.dim, cfg.max_depth)
            est = chi2_problem_mc(P_T, P_S, cfg.n_mc, self._seed("mc", format_sweep(fraction)))
            self._chi2_problem[fraction] = max(0.0, est.estimate)
        return self._chi2_problem[fraction]

    def chi2_algo(self, train_a: Sequence[int], test_a: Sequence[int]) -> float:
        return chi2_categorical(algo_weights_for(test_a, self.universe_ids), algo_weights_for(train_a, self.universe_ids),
                                self.cfg.smoothing_eps)


def _n_test(cfg: ExperimentConfig, n_train: int) -> int:
    return max(1, int(round(cfg.eta * n_train)))


def _split(world: _World, point: SweepPoint, cond: Condition) -> DataSplit:
    cfg = world.cfg
    fraction = point.fraction if cond.problem_shift else 0.0
    pool = world.train_pool(fraction)
    train_p = sorted(p.id for p in pool.problems[:point.n_problems])
    test_p = sorted(p.id for p in world.test.problems[:_n_test(cfg, point.n_problems)])
    train_a = world.universe_ids[:point.n_algos]
    test_a = apply_algo_shift(train_a, point.n_new, world.universe_ids) if cond.algo_shift else list(train_a)
    return DataSplit(train_p, test_p, list(train_a), test_a)


def _chi2(world: _World, point: SweepPoint, cond: Condition, split: DataSplit) -> Optional[float]:
    if cond.shift is ShiftKind.NONE:
        return None
    chi2_p = world.chi2_problem(point.fraction) if cond.problem_shift else 0.0
    chi2_a = world.chi2_algo(split.train_algo_ids, split.test_algo_ids) if cond.algo_shift else 0.0
    return chi2_joint(chi2_p, chi2_a)


# -----------------------
# Cells
# -----------------------

@dataclass(frozen=True)
class _SeedJob:
    cfg: ExperimentConfig
    seed: int
    skip: FrozenSet[Tuple[str, str, str, int]]


def _run_seed(job: _SeedJob) -> List[ResultRow]:
    cfg, seed = job.cfg, job.seed
    keys = planned_keys(cfg, seed)
    if all(k in job.skip for k in keys):
        return []
    world = _World(cfg, seed)
    models: Dict[tuple, SelectorModel] = {}
    rows: List[ResultRow] = []

    for point in cfg.points():
        for cond in conditions(cfg):
            cell = (cfg.scenario.value, format_sweep(point.value), cond.series, seed)
            if cell in job.skip:
                continue
            try:
                rows.append(_run_cell(world, point, cond, models, cell))
            except LabException as e:
                if isinstance(e, ExperimentException):
                    raise
                raise ExperimentException(cell, e) from e
            except (ArithmeticError, ValueError, FloatingPointError) as e:
                raise ExperimentException(cell, e) from e
    return rows


def _run_cell(world: _World, point: SweepPoint, cond: Condition, models: Dict[tuple, SelectorModel], cell: tuple) -> ResultRow:
    cfg = world.cfg
    start = time.perf_counter()
    fraction = point.fraction if cond.problem_shift else 0.0
    split = _split(world, point, cond)
    data, perf = world.data(fraction), world.perf(fraction)

    #training data does not depend on the test algorithms, so shift sweeps over n_new reuse one model
    model_key = (cond.kind, point.n_problems, point.n_algos, point.width, format_sweep(fraction))
    if model_key not in models:
        train_seed = derive_seed(cfg.master_seed, world.seed, "model", cond.kind.kind_name, *model_key[1:])
        bindings = bindings_for(cond.kind, data, split, cfg.gamma_margin)
        untrained = build(cond.kind, bindings, point.width, train_seed)
        models[model_key] = fit(untrained, data, split, perf, TrainHyper(cfg.epochs, cfg.lr, train_seed))
    model = models[model_key]

    result = evaluate(model, data, split, perf, fallback=True)
    chi2 = _chi2(world, point, cond, split)
    inputs = bound_inputs(model, data, split, cfg.delta, chi2 if chi2 is not None else 0.0)
    report = bound_for_model(cond.kind, inputs, result.error_S)
    if result.fallback_count:
        logger.warning(f"{cond.series} at {format_sweep(point.value)}: fallback to known algorithms on {result.fallback_count} problems")
    return ResultRow(
        scenario=cell[0],
        sweep_value=point.value,
        model=cond.series,
        seed=world.seed,
        error_S=result.error_S,
        error_T=result.error_T,
        gap=result.gap,
        bound=report.value,
        chi2=chi2,
        fallback=result.fallback_count > 0,
        wall_time_s=time.perf_counter() - start,
    )


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, existing: Iterable[Tuple[str, str, str, int]] = (),
                   on_row: Optional[Callable[[ResultRow], None]] = None) -> List[ResultRow]:
    '''
    full factorial sweep x series x seeds. Cells whose key is in existing are skipped;
    on_row receives each new row in seed order (the single writer).
    '''
    skip = frozenset(existing)
    work = [_SeedJob(cfg, s, skip) for s in range(cfg.n_seeds)]
    out: List[ResultRow] = []
    for seed, rows in enumerate(parallel_imap(_run_seed, work, jobs)):
        for row in rows:
            if on_row is not None:
                on_row(row)
            out.append(row)
        logger.info(f"{cfg.scenario.value}: seed {seed} done ({len(rows)} new rows)")
    return out


# -----------------------
# Summary
# -----------------------

class Summary(NamedTuple):
    table: pd.DataFrame  #one row per (scenario, sweep_value, model)
    trends: Dict[str, float]  #Spearman rho of mean accuracy vs sweep value, per model


def rows_to_frame(rows: Sequence[ResultRow]) -> pd.DataFrame:
    frame = pd.DataFrame([vars(r) for r in rows], columns=RESULT_COLUMNS)
    for col in ("sweep_value", "error_S", "error_T", "gap", "bound", "chi2", "wall_time_s"):
        frame[col] = frame[col].astype(float)
    frame["accuracy"] = 1.0 - frame["error_T"]
    return frame


def spearman(x: pd.Series, y: pd.Series) -> float:
    '''rank correlation; nan with fewer than two distinct points'''
    if len(x) < 2:
        return math.nan
    frame = pd.DataFrame({"x": np.asarray(x, dtype=np.float64), "y": np.asarray(y, dtype=np.float64)})
    return float(frame.corr(method="spearman").at["x", "y"])


def summarize(rows: Sequence[ResultRow]) -> Summary:
    if not rows:
        raise LabValidationException("Nothing to summarize: no result rows")
    scenarios = {r.scenario for r in rows}
    if len(scenarios) != 1:
        raise LabValidationException(f"Rows mix scenarios {sorted(scenarios)}")
    frame = rows_to_frame(rows)
    grouped = frame.groupby(["scenario", "sweep_value", "model"], sort=True)
    table = grouped.agg(
        n=("seed", "count"),
        accuracy_mean=("accuracy", "mean"),
        accuracy_std=("accuracy", "std"),
        gap_mean=("gap", "mean"),
        gap_std=("gap", "std"),
        bound_mean=("bound", "mean"),
    ).reset_index()
    table[["accuracy_std", "gap_std"]] = table[["accuracy_std", "gap_std"]].fillna(0.0)
    trends = {
        model: spearman(part["sweep_value"], part["accuracy_mean"])
        for model, part in table.groupby("model", sort=True)
    }
    return Summary(table, trends)
