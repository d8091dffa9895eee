"""
Train/test generators and the chi-square divergence between them.

Algorithm sets are categorical, so their divergence is exact. Problem generators
are compared by importance sampling: trees are drawn from the training generator
and weighted by the exact likelihood ratio from tree_logprob.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Union

import numpy as np

from lab_constants import LabConstants, LabValidationException
from expression import OperatorTable, sample_tree, tree_logprob
from seeding import derive_seed, parallel_map

logger = logging.getLogger("SHIFT")

Weights = Union[Mapping[object, float], Sequence[float]]

MIN_MC_DRAWS = 100


class DivergenceException(LabValidationException):
    pass


@dataclass
class GenerativeConfig:
    operator_table: OperatorTable
    algo_weights: Dict[int, float]
    dim: int = LabConstants.DEFAULT_DIM
    max_depth: int = LabConstants.DEFAULT_MAX_DEPTH

    def __post_init__(self):
        self.algo_weights = {int(a): float(w) for a, w in self.algo_weights.items()}
        if any(not math.isfinite(w) or w < 0 for w in self.algo_weights.values()):
            raise DivergenceException("Algorithm weights must be finite and >= 0")
        if not any(w > 0 for w in self.algo_weights.values()):
            raise DivergenceException("At least one algorithm weight must be positive")
        if self.dim < 1 or self.max_depth < 2:
            raise DivergenceException(f"Need dim >= 1 and max_depth >= 2, got dim={self.dim} max_depth={self.max_depth}")

    def to_dict(self) -> dict:
        return {
            "operator_table": self.operator_table.to_dict(),
            "algo_weights": {str(a): w for a, w in sorted(self.algo_weights.items())},
            "dim": self.dim,
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerativeConfig":
        try:
            return cls(OperatorTable.from_dict(data["operator_table"]),
                       {int(a): float(w) for a, w in data["algo_weights"].items()},
                       int(data.get("dim", LabConstants.DEFAULT_DIM)),
                       int(data.get("max_depth", LabConstants.DEFAULT_MAX_DEPTH)))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise DivergenceException(f"Malformed generative config: {e}") from e


def algo_weights_for(ids: Iterable[int], universe: Iterable[int]) -> Dict[int, float]:
    '''uniform weight over ids, zero over the rest of the universe'''
    chosen = {int(a) for a in ids}
    out = {int(u): (1.0 if int(u) in chosen else 0.0) for u in universe}
    missing = chosen - set(out)
    if missing:
        raise DivergenceException(f"Ids {sorted(missing)} are not in the algorithm universe")
    return out


# -----------------------
# Categorical
# -----------------------

def _as_mapping(w: Weights) -> Dict[object, float]:
    if isinstance(w, Mapping):
        return {k: float(v) for k, v in w.items()}
    return {i: float(v) for i, v in enumerate(w)}


def chi2_categorical(p: Weights, q: Weights, eps: float = 0.0) -> float:
    '''
    sum_i p_i^2 / q_i - 1 over the union support after adding eps to every q_i
    and normalising both; inf when some p_i > 0 has q_i = 0
    '''
    if eps < 0:
        raise DivergenceException(f"Smoothing eps must be >= 0, got {eps}")
    p, q = _as_mapping(p), _as_mapping(q)
    for name, w in (("p", p), ("q", q)):
        if any(not math.isfinite(v) or v < 0 for v in w.values()):
            raise DivergenceException(f"Weights of {name} must be finite and >= 0")
    keys = list(p) + [k for k in q if k not in p]
    q_s = {k: q.get(k, 0.0) + eps for k in keys}
    p_total, q_total = math.fsum(p.values()), math.fsum(q_s.values())
    if p_total <= 0 or q_total <= 0:
        raise DivergenceException("Weights must not sum to zero")
    terms = []
    for k in keys:
        pk = p.get(k, 0.0) / p_total
        if pk == 0.0:
            continue
        qk = q_s[k] / q_total
        if qk == 0.0:
            return math.inf
        terms.append(pk * pk / qk)
    return max(0.0, math.fsum(terms) - 1.0)


def chi2_joint(chi2_problem: float, chi2_algo: float) -> float:
    '''(1 + a)(1 + b) - 1 for independent problem and algorithm generators'''
    if math.isinf(chi2_problem) or math.isinf(chi2_algo):
        return math.inf
    return (1.0 + chi2_problem) * (1.0 + chi2_algo) - 1.0


# -----------------------
# Problem generators
# -----------------------

class ChiSquareEstimate(NamedTuple):
    estimate: float
    stderr: float
    n: int
    in_support: bool


def support_violation(P_T: GenerativeConfig, P_S: GenerativeConfig) -> str:
    '''empty string when every tree P_T can produce is producible under P_S'''
    t, s = P_T.operator_table, P_S.operator_table
    for e in t.entries:
        if e.weight > 0 and s.weight(e.op_id) <= 0:
            return f'operator "{e.op_id}" has no training weight'
    if t.leaf_var_weight > 0 and s.leaf_var_weight <= 0:
        return "variable leaves have no training weight"
    if t.leaf_const_weight > 0 and s.leaf_const_weight <= 0:
        return "constant leaves have no training weight"
    if P_T.max_depth > P_S.max_depth:
        return f"test depth {P_T.max_depth} exceeds training depth {P_S.max_depth}"
    return ""


@dataclass(frozen=True)
class _MCJob:
    P_T: GenerativeConfig
    P_S: GenerativeConfig
    seeds: tuple


def _mc_weights(job: _MCJob) -> List[float]:
    out = []
    for s in job.seeds:
        tree, lp_S = sample_tree(job.P_S.operator_table, job.P_S.dim, job.P_S.max_depth, s)
        lp_T = tree_logprob(tree, job.P_T.operator_table, job.P_T.dim, job.P_T.max_depth)
        out.append(math.exp(2.0 * (lp_T.logprob - lp_S)) if lp_T.in_support else 0.0)
    return out


def chi2_problem_mc(P_T: GenerativeConfig, P_S: GenerativeConfig, n: int = LabConstants.DEFAULT_MC_DRAWS,
                    seed: int = 0, jobs: int = 1) -> ChiSquareEstimate:
    '''mean of (P_T/P_S)^2 over n draws from P_S, minus 1, with its standard error'''
    if n < MIN_MC_DRAWS:
        raise DivergenceException(f"Need at least {MIN_MC_DRAWS} Monte Carlo draws, got {n}")
    if P_T.dim != P_S.dim:
        raise DivergenceException(f"Generators disagree on dim: {P_T.dim} vs {P_S.dim}")
    P_S.operator_table.check_distribution()
    reason = support_violation(P_T, P_S)
    if reason:
        logger.warning(f"chi2 is infinite: {reason}")
        return ChiSquareEstimate(math.inf, 0.0, n, False)

    seeds = [derive_seed(seed, "mc", i) for i in range(n)]
    chunk = max(1, math.ceil(n / max(1, jobs)))
    work = [_MCJob(P_T, P_S, tuple(seeds[i:i + chunk])) for i in range(0, n, chunk)]
    w2 = np.array([w for part in parallel_map(_mc_weights, work, jobs) for w in part], dtype=np.float64)
    estimate = float(w2.mean() - 1.0)
    stderr = float(w2.std(ddof=1) / math.sqrt(n))
    logger.info(f"problem chi2 = {estimate:.4f} +- {stderr:.4f} over {n} draws")
    return ChiSquareEstimate(estimate, stderr, n, True)


# -----------------------
# Shifts
# -----------------------

def apply_problem_shift(table: OperatorTable, fraction: float, scale: float = LabConstants.SHIFT_SCALE,
                        seed: int = 0) -> OperatorTable:
    '''multiplies a seeded ceil(fraction * count) subset of operator weights by scale'''
    if not 0.0 <= fraction <= 1.0:
        raise DivergenceException(f"Shift fraction must be in [0, 1], got {fraction}")
    if not scale > 0:
        raise DivergenceException(f"Shift scale must be > 0, got {scale}")
    count = len(table.entries)
    k = min(count, math.ceil(fraction * count - 1e-9))
    if k <= 0:
        return table
    rng = np.random.default_rng(derive_seed(seed, "problem_shift"))
    chosen = sorted(int(i) for i in rng.choice(count, size=k, replace=False))
    weights = {table.entries[i].op_id: table.entries[i].weight * scale for i in chosen}
    logger.info(f"scaled {k}/{count} operators by {scale}: {sorted(weights)}")
    return table.with_weights(weights)


def apply_algo_shift(train_ids: Iterable[int], n_new: int, universe: Iterable[int]) -> List[int]:
    '''training ids plus the n_new lowest universe ids not already used'''
    train = sorted({int(a) for a in train_ids})
    if n_new < 0:
        raise DivergenceException(f"n_new must be >= 0, got {n_new}")
    used = set(train)
    fresh = [u for u in sorted({int(u) for u in universe}) if u not in used]
    if len(fresh) < n_new:
        raise DivergenceException(f"Algorithm universe exhausted: need {n_new} new ids, {len(fresh)} available")
    return sorted(train + fresh[:n_new])


# -----------------------
# Report
# -----------------------

@dataclass
class DivergenceReport:
    chi2_algo: float
    chi2_problem: float
    chi2_problem_stderr: float = 0.0
    n_mc: int = 0
    smoothing_eps: float = 0.0
    reason: str = field(default="")

    @property
    def chi2_joint(self) -> float:
        return chi2_joint(max(0.0, self.chi2_problem), self.chi2_algo)

    def to_dict(self) -> dict:
        def num(v: float):
            return v if math.isfinite(v) else repr(float(v))
        return {
            "chi2_algo": num(self.chi2_algo),
            "chi2_problem_mc": num(self.chi2_problem),
            "chi2_problem_stderr": self.chi2_problem_stderr,
            "chi2_joint": num(self.chi2_joint),
            "n_mc": self.n_mc,
            "smoothing_eps": self.smoothing_eps,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DivergenceReport":
        try:
            return cls(float(data["chi2_algo"]), float(data["chi2_problem_mc"]),
                       float(data.get("chi2_problem_stderr", 0.0)), int(data.get("n_mc", 0)),
                       float(data.get("smoothing_eps", 0.0)), str(data.get("reason", "")))
        except (KeyError, TypeError, ValueError) as e:
            raise DivergenceException(f"Malformed divergence report: {e}") from e


def divergence_report(P_T: GenerativeConfig, P_S: GenerativeConfig, n: int = LabConstants.DEFAULT_MC_DRAWS,
                      seed: int = 0, eps: float = 0.0, jobs: int = 1) -> DivergenceReport:
    chi2_algo = chi2_categorical(P_T.algo_weights, P_S.algo_weights, eps)
    mc = chi2_problem_mc(P_T, P_S, n, seed, jobs)
    reason = "" if mc.in_support else support_violation(P_T, P_S)
    if math.isinf(chi2_algo):
        reason = (reason + "; " if reason else "") + "test algorithms outside the training support"
    return DivergenceReport(chi2_algo, mc.estimate, mc.stderr, mc.n, eps, reason)
