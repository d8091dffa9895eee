# data_processor.py
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from lab_constants import LabConstants, LabValidationException, ModelKind, Operator, Scenario, ShiftKind
from bounds import BoundInputs, BoundReport
from distshift import DivergenceReport, GenerativeConfig
from experiments import RESULT_COLUMNS, ExperimentConfig, ResultRow
from expression import OperatorTable, ProblemInstance, instance_from_record
from labeling import DataSplit, PerformanceMatrix
from metaheuristics import AlgorithmSpec
from selector_models import SelectorModel


class DataFormatException(LabValidationException):
    '''unreadable artifact or config; message names the path (and line when known)'''
    pass


PROBLEMS_FILE = "problems.jsonl"
GENERATOR_FILE = "generator.json"
PORTFOLIO_FILE = "portfolio.json"
PERF_FILE = "perf.csv"
LABELS_FILE = "labels.csv"
SPLIT_FILE = "split.json"
MODEL_FILE = "model.json"
EVAL_FILE = "eval.json"
BOUNDS_FILE = "bounds.json"
SHIFT_FILE = "shift.json"
RESULTS_FILE = "results.csv"


# ----------------------------
# Configs
# ----------------------------

def operator_table(operators: Optional[Dict[str, float]], leaf_var_weight: float, leaf_const_weight: float) -> OperatorTable:
    '''None means every operator at weight 1'''
    weights = operators if operators is not None else {op.symbol: 1.0 for op in Operator}
    return OperatorTable.from_weights(weights, leaf_var_weight, leaf_const_weight)


@dataclass
class GenConfig:
    n_problems: int = 200
    dim: int = LabConstants.DEFAULT_DIM
    max_depth: int = LabConstants.DEFAULT_MAX_DEPTH
    L_max: int = LabConstants.DEFAULT_L_MAX
    lo: float = LabConstants.DEFAULT_LO
    hi: float = LabConstants.DEFAULT_HI
    operators: Optional[Dict[str, float]] = None  #op symbol -> weight; None = every operator at 1
    leaf_var_weight: float = 7.0
    leaf_const_weight: float = 3.0

    def table(self) -> OperatorTable:
        return operator_table(self.operators, self.leaf_var_weight, self.leaf_const_weight)


@dataclass
class LabelConfig:
    n_algos: int = 10
    iterations: int = LabConstants.DEFAULT_ITERATIONS
    n_runs: int = LabConstants.DEFAULT_N_RUNS


@dataclass
class SplitConfig:
    test_fraction: float = 0.2


@dataclass
class TrainConfig:
    model: str = "ModelB"
    width: float = 1.0
    epochs: int = LabConstants.DEFAULT_EPOCHS
    lr: float = LabConstants.DEFAULT_LR
    gamma_margin: float = LabConstants.GAMMA_MARGIN
    transductive: bool = True

    @property
    def kind(self) -> ModelKind:
        return ModelKind.from_name(self.model)


@dataclass
class BoundsConfig:
    delta: float = LabConstants.DELTA
    chi2: float = 0.0
    p_transductive: float = 0.5
    inputs: Optional[Dict[str, Any]] = None  #explicit BoundInputs instead of the trained model's
    error_S: float = 0.0  #used with explicit inputs
    model: str = "ModelA"  #which bound is primary with explicit inputs


@dataclass
class DivergenceConfig:
    n_mc: int = LabConstants.DEFAULT_MC_DRAWS
    eps: float = 0.0
    shift_fraction: float = 0.0
    shift_scale: float = LabConstants.SHIFT_SCALE
    n_new: int = 0


@dataclass
class LabConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    experiment: Optional[ExperimentConfig] = None
    raw: Dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.raw)


def _section(cls, data: Any, name: str, path: str):
    if not isinstance(data, dict):
        raise DataFormatException(f'{path}: section "{name}" must be an object')
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise DataFormatException(f'{path}: unknown keys {unknown} in section "{name}"')
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise DataFormatException(f'{path}: bad section "{name}": {e}') from e


def parse_experiment_config(data: Dict[str, Any], path: str = "<config>") -> ExperimentConfig:
    data = dict(data)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} | {"operators", "leaf_var_weight", "leaf_const_weight"}
    unknown = sorted(set(data) - known - {"operator_table"})
    if unknown:
        raise DataFormatException(f'{path}: unknown keys {unknown} in section "experiment"')
    try:
        data["scenario"] = Scenario(data["scenario"])
        if "models" in data:
            data["models"] = [ModelKind.from_name(m) for m in data["models"]]
        if "shift_kind" in data:
            data["shift_kind"] = ShiftKind(data["shift_kind"])
        ops = data.pop("operators", None)
        leaf_var = float(data.pop("leaf_var_weight", 7.0))
        leaf_const = float(data.pop("leaf_const_weight", 3.0))
        if isinstance(data.get("operator_table"), dict):
            data["operator_table"] = OperatorTable.from_dict(data["operator_table"])
        else:
            data["operator_table"] = operator_table(ops, leaf_var, leaf_const)
        return ExperimentConfig(**data)
    except KeyError as e:
        raise DataFormatException(f"{path}: experiment is missing or names an unknown {e}") from e
    except (TypeError, ValueError) as e:
        raise DataFormatException(f"{path}: bad experiment section: {e}") from e


SECTIONS = {
    "gen": GenConfig,
    "label": LabelConfig,
    "split": SplitConfig,
    "train": TrainConfig,
    "bounds": BoundsConfig,
    "divergence": DivergenceConfig,
}


def parse_config(data: Dict[str, Any], path: str = "<config>") -> LabConfig:
    if not isinstance(data, dict):
        raise DataFormatException(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"experiment"})
    if unknown:
        raise DataFormatException(f"{path}: unknown sections {unknown}")
    kw = {name: _section(cls, data[name], name, path) for name, cls in SECTIONS.items() if name in data}
    if "experiment" in data:
        kw["experiment"] = parse_experiment_config(data["experiment"], path)
    return LabConfig(raw=data, **kw)


def load_config(path: Optional[str]) -> LabConfig:
    if path is None:
        return LabConfig()
    return parse_config(read_json(path), path)


# ----------------------------
# JSON helpers and manifests
# ----------------------------

def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataFormatException(f"{path}: file not found") from e
    except json.JSONDecodeError as e:
        raise DataFormatException(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e


def write_json(path: str, obj: Any):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True))
        f.write("\n")


def manifest_path(artifact: str) -> str:
    return artifact + ".manifest.json"


@dataclass
class RunManifest:
    master_seed: int
    config: Dict[str, Any]
    inputs: List[str]
    outputs: List[str]
    started: str
    finished: str = ""
    tool_version: str = LabConstants.TOOL_VERSION
    config_digest: str = ""

    def __post_init__(self):
        if not self.config_digest:
            self.config_digest = config_digest(self.config)

    def verify(self) -> bool:
        return config_digest(self.config) == self.config_digest


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def append_manifest(artifact: str, manifest: RunManifest):
    '''runs are only ever appended'''
    path = manifest_path(artifact)
    runs = read_manifest(artifact) if os.path.exists(path) else []
    runs.append(manifest)
    write_json(path, {"runs": [dataclasses.asdict(m) for m in runs]})


def read_manifest(artifact: str) -> List[RunManifest]:
    path = manifest_path(artifact)
    data = read_json(path)
    try:
        return [RunManifest(**entry) for entry in data["runs"]]
    except (KeyError, TypeError) as e:
        raise DataFormatException(f"{path}: malformed manifest: {e}") from e


# ----------------------------
# Problems and generator
# ----------------------------

def write_generator(path: str, table: OperatorTable, dim: int, max_depth: int, L_max: int):
    write_json(path, {"operator_table": table.to_dict(), "dim": dim, "max_depth": max_depth, "L_max": L_max})


def read_generator(path: str) -> Tuple[OperatorTable, int, int, int]:
    data = read_json(path)
    try:
        return OperatorTable.from_dict(data["operator_table"]), int(data["dim"]), int(data["max_depth"]), int(data["L_max"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatException(f"{path}: malformed generator: {e}") from e


def write_problems(path: str, problems: Sequence[ProblemInstance]):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for p in problems:
            f.write(canonical_json(p.to_record()))
            f.write("\n")


def read_problems(path: str, vocab: OperatorTable, L_max: int = LabConstants.DEFAULT_L_MAX) -> List[ProblemInstance]:
    out: List[ProblemInstance] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    out.append(instance_from_record(json.loads(line), vocab, L_max))
                except (json.JSONDecodeError, LabValidationException) as e:
                    raise DataFormatException(f"{path}:{lineno}: {e}") from e
    except FileNotFoundError as e:
        raise DataFormatException(f"{path}: file not found") from e
    return out


# ----------------------------
# Portfolio, matrices, split, model
# ----------------------------

def write_portfolio(path: str, portfolio: Sequence[AlgorithmSpec]):
    write_json(path, {"algorithms": [a.to_dict() for a in portfolio]})


def read_portfolio(path: str) -> List[AlgorithmSpec]:
    data = read_json(path)
    try:
        return [AlgorithmSpec.from_dict(d) for d in data["algorithms"]]
    except (KeyError, TypeError) as e:
        raise DataFormatException(f"{path}: malformed portfolio: {e}") from e


def _write_csv(path: str, columns: List[str], records: Iterable[Dict[str, str]], append: bool = False):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame = pd.DataFrame(list(records), columns=columns, dtype=str)
    header = not (append and os.path.exists(path))
    frame.to_csv(path, mode="a" if append else "w", header=header, index=False, lineterminator="\n")


def _read_csv(path: str, columns: List[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise DataFormatException(f"{path}: file not found") from e
    except pd.errors.EmptyDataError as e:
        raise DataFormatException(f"{path}: empty file") from e
    if list(frame.columns) != columns:
        raise DataFormatException(f"{path}: header {list(frame.columns)} does not match {columns}")
    return frame


PERF_COLUMNS = ["problem_id", "algo_id", "mean_best", "n_runs"]


def write_perf(path: str, matrix: PerformanceMatrix):
    '''long format, problem-major'''
    records = (
        {"problem_id": str(p), "algo_id": str(a), "mean_best": repr(float(matrix.mean_best[i, j])), "n_runs": str(matrix.n_runs)}
        for i, p in enumerate(matrix.problem_ids)
        for j, a in enumerate(matrix.algo_ids)
    )
    _write_csv(path, PERF_COLUMNS, records)


def read_perf(path: str) -> PerformanceMatrix:
    frame = _read_csv(path, PERF_COLUMNS)
    try:
        pids = list(dict.fromkeys(int(p) for p in frame["problem_id"]))
        aids = list(dict.fromkeys(int(a) for a in frame["algo_id"]))
        if len(frame) != len(pids) * len(aids):
            raise DataFormatException(f"{path}: expected {len(pids) * len(aids)} rows, got {len(frame)}")
        values = np.array([float(v) for v in frame["mean_best"]]).reshape(len(pids), len(aids))
        n_runs = {int(n) for n in frame["n_runs"]}
    except ValueError as e:
        raise DataFormatException(f"{path}: {e}") from e
    if len(n_runs) != 1:
        raise DataFormatException(f"{path}: mixed n_runs values {sorted(n_runs)}")
    return PerformanceMatrix(pids, aids, values, n_runs.pop())


def write_labels(path: str, matrix: PerformanceMatrix):
    records = ({"problem_id": str(p), "best_algo": str(b)} for p, b in matrix.labels().items())
    _write_csv(path, ["problem_id", "best_algo"], records)


def read_labels(path: str) -> Dict[int, int]:
    frame = _read_csv(path, ["problem_id", "best_algo"])
    return {int(p): int(b) for p, b in zip(frame["problem_id"], frame["best_algo"])}


def write_split(path: str, split: DataSplit):
    write_json(path, split.to_dict())


def read_split(path: str) -> DataSplit:
    return DataSplit.from_dict(read_json(path))


def write_model(path: str, model: SelectorModel):
    write_json(path, model.to_dict())


def read_model(path: str) -> SelectorModel:
    return SelectorModel.from_dict(read_json(path))


# ----------------------------
# Bounds and shift
# ----------------------------

def write_bounds(path: str, inputs: BoundInputs, error_S: float, primary: BoundReport, reports: Dict[str, BoundReport]):
    write_json(path, {
        "inputs": inputs.to_dict(),
        "error_S": error_S,
        "primary": primary.kind,
        "reports": {k: r.to_dict() for k, r in reports.items()},
    })


def write_shift(path: str, train: GenerativeConfig, test: GenerativeConfig, report: DivergenceReport):
    write_json(path, {"train": train.to_dict(), "test": test.to_dict(), "report": report.to_dict()})


def read_shift(path: str) -> Tuple[GenerativeConfig, GenerativeConfig, DivergenceReport]:
    data = read_json(path)
    try:
        return (GenerativeConfig.from_dict(data["train"]), GenerativeConfig.from_dict(data["test"]),
                DivergenceReport.from_dict(data["report"]))
    except KeyError as e:
        raise DataFormatException(f"{path}: missing {e}") from e


# ----------------------------
# Results
# ----------------------------

class ResultsWriter:
    '''single writer appending rows to results.csv as they arrive'''
    def __init__(self, path: str):
        self.path = path
        if os.path.exists(path):
            _read_csv(path, RESULT_COLUMNS)
        self.written = 0

    def __call__(self, row: ResultRow):
        _write_csv(self.path, RESULT_COLUMNS, [row.to_record()], append=True)
        self.written += 1


def read_results(path: str) -> List[ResultRow]:
    frame = _read_csv(path, RESULT_COLUMNS)
    return [ResultRow.from_record(rec) for rec in frame.to_dict(orient="records")]


def existing_keys(path: str) -> Set[Tuple[str, str, str, int]]:
    if not os.path.exists(path):
        return set()
    return {r.key for r in read_results(path)}


def write_results(path: str, rows: Sequence[ResultRow]):
    _write_csv(path, RESULT_COLUMNS, [r.to_record() for r in rows])
