"""
Performance matrix M: P x A -> mean best objective over repeated seeded runs,
best-algorithm labels, and the problem-level train/test split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from lab_constants import LabConstants, LabValidationException
from expression import ProblemInstance
from metaheuristics import AlgorithmSpec, run
from seeding import derive_seed, parallel_map

logger = logging.getLogger("LABEL")


class LabelingException(LabValidationException):
    pass


def _argmin_lowest_id(values: Sequence[float], ids: Sequence[int]) -> int:
    '''argmin over values; exact ties go to the lowest id, not the first position'''
    return min(zip(values, ids))[1]


@dataclass(eq=False)
class PerformanceMatrix:
    problem_ids: List[int]
    algo_ids: List[int]
    mean_best: np.ndarray
    n_runs: int
    best_algo: np.ndarray = field(init=False)

    def __post_init__(self):
        self.problem_ids = [int(p) for p in self.problem_ids]
        self.algo_ids = [int(a) for a in self.algo_ids]
        self.mean_best = np.asarray(self.mean_best, dtype=np.float64)
        if self.mean_best.shape != (len(self.problem_ids), len(self.algo_ids)):
            raise LabelingException(
                f"mean_best has shape {self.mean_best.shape}, expected {(len(self.problem_ids), len(self.algo_ids))}"
            )
        if not self.problem_ids or not self.algo_ids:
            raise LabelingException("Performance matrix needs at least one problem and one algorithm")
        if len(set(self.problem_ids)) != len(self.problem_ids) or len(set(self.algo_ids)) != len(self.algo_ids):
            raise LabelingException("Duplicate problem or algorithm ids")
        if not np.all(np.isfinite(self.mean_best)):
            raise LabelingException("Performance matrix has non-finite entries")
        if self.n_runs < 1:
            raise LabelingException(f"n_runs must be >= 1, got {self.n_runs}")
        self.best_algo = best_among(self, self.algo_ids)
        self._row = {p: i for i, p in enumerate(self.problem_ids)}
        self._col = {a: j for j, a in enumerate(self.algo_ids)}

    def row_index(self, problem_id: int) -> int:
        return self._row[problem_id]

    def col_index(self, algo_id: int) -> int:
        return self._col[algo_id]

    def value(self, problem_id: int, algo_id: int) -> float:
        return float(self.mean_best[self._row[problem_id], self._col[algo_id]])

    def best_for(self, problem_id: int) -> int:
        return int(self.best_algo[self._row[problem_id]])

    def labels(self) -> Dict[int, int]:
        return {p: int(b) for p, b in zip(self.problem_ids, self.best_algo)}


def best_among(matrix: PerformanceMatrix, algo_ids: Sequence[int]) -> np.ndarray:
    '''best algorithm per problem (aligned with matrix.problem_ids) restricted to algo_ids'''
    algo_ids = [int(a) for a in algo_ids]
    cols = [matrix.algo_ids.index(a) for a in algo_ids]
    sub = matrix.mean_best[:, cols]
    return np.array([_argmin_lowest_id(row, algo_ids) for row in sub.tolist()], dtype=np.int64)


def subset(matrix: PerformanceMatrix, problem_ids: Sequence[int], algo_ids: Sequence[int]) -> PerformanceMatrix:
    rows = [matrix.row_index(int(p)) for p in problem_ids]
    cols = [matrix.col_index(int(a)) for a in algo_ids]
    return PerformanceMatrix(list(problem_ids), list(algo_ids), matrix.mean_best[np.ix_(rows, cols)], matrix.n_runs)


@dataclass(frozen=True)
class _RowJob:
    problem: ProblemInstance
    portfolio: Tuple[AlgorithmSpec, ...]
    n_runs: int
    master_seed: int


def _label_row(job: _RowJob) -> List[float]:
    row = []
    for algo in job.portfolio:
        values = [
            run(algo, job.problem, derive_seed(job.master_seed, job.problem.id, algo.id, r)).best_value
            for r in range(job.n_runs)
        ]
        row.append(float(np.mean(values)))
    return row


def label(problems: Sequence[ProblemInstance], portfolio: Sequence[AlgorithmSpec],
          n_runs: int = LabConstants.DEFAULT_N_RUNS, master_seed: int = 0, jobs: int = 1) -> PerformanceMatrix:
    if not problems or not portfolio:
        raise LabelingException("label needs at least one problem and one algorithm")
    if n_runs < 1:
        raise LabelingException(f"n_runs must be >= 1, got {n_runs}")
    work = [_RowJob(p, tuple(portfolio), n_runs, master_seed) for p in problems]
    rows = parallel_map(_label_row, work, jobs)
    matrix = PerformanceMatrix([p.id for p in problems], [a.id for a in portfolio], np.array(rows), n_runs)
    logger.info(f"labelled {len(problems)} problems x {len(portfolio)} algorithms ({n_runs} runs per cell)")
    return matrix


# -----------------------
# Split
# -----------------------

@dataclass
class DataSplit:
    train_problem_ids: List[int]
    test_problem_ids: List[int]
    train_algo_ids: List[int]
    test_algo_ids: List[int]

    @property
    def S_P(self) -> int:
        return len(self.train_problem_ids)

    @property
    def T_P(self) -> int:
        return len(self.test_problem_ids)

    @property
    def S_A(self) -> int:
        return len(self.train_algo_ids)

    @property
    def T_A(self) -> int:
        return len(self.test_algo_ids)

    @property
    def eta(self) -> float:
        return self.T_P / self.S_P

    @property
    def n_train_pairs(self) -> int:
        return self.S_P * self.S_A

    @property
    def n_test_pairs(self) -> int:
        return self.T_P * self.T_A

    def with_test_algos(self, algo_ids: Sequence[int]) -> "DataSplit":
        return DataSplit(list(self.train_problem_ids), list(self.test_problem_ids), list(self.train_algo_ids), sorted(int(a) for a in algo_ids))

    def to_dict(self) -> dict:
        return {
            "train_problem_ids": self.train_problem_ids,
            "test_problem_ids": self.test_problem_ids,
            "train_algo_ids": self.train_algo_ids,
            "test_algo_ids": self.test_algo_ids,
            "eta": self.eta,
            "n_train_pairs": self.n_train_pairs,
            "n_test_pairs": self.n_test_pairs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DataSplit":
        try:
            out = cls(
                [int(p) for p in data["train_problem_ids"]],
                [int(p) for p in data["test_problem_ids"]],
                [int(a) for a in data["train_algo_ids"]],
                [int(a) for a in data["test_algo_ids"]],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise LabelingException(f"Malformed split: {e}") from e
        if not out.train_problem_ids:
            raise LabelingException("Split has no training problems")
        return out


def split(matrix: PerformanceMatrix, problems: Sequence[ProblemInstance], test_fraction: float, seed: int) -> DataSplit:
    '''disjoint problem-level split; training and test share the matrix's algorithms'''
    if not 0.0 < test_fraction < 0.5:
        raise LabelingException(f"test_fraction must be in (0, 0.5), got {test_fraction}")
    ids = [p.id for p in problems]
    known = set(matrix.problem_ids)
    missing = [p for p in ids if p not in known]
    if missing:
        raise LabelingException(f"{len(missing)} problems are not in the performance matrix")
    n_test = int(round(test_fraction * len(ids)))
    if n_test < 1 or n_test >= len(ids) - n_test:
        raise LabelingException(f"Cannot split {len(ids)} problems with test_fraction {test_fraction}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    perm = rng.permutation(len(ids))
    test = sorted(ids[i] for i in perm[:n_test])
    train = sorted(ids[i] for i in perm[n_test:])
    algos = list(matrix.algo_ids)
    return DataSplit(train, test, algos, list(algos))
