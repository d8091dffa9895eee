"""
Metaheuristic portfolio: five optimizer families, their hyperparameter jitter and
the predefined feature vector each configuration exposes to the selectors.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple

import numpy as np

from lab_constants import AlgoFamily, LabConstants, LabValidationException
from expression import ProblemInstance, compile_objective
from seeding import derive_seed

logger = logging.getLogger("PORTFOLIO")


class PortfolioException(LabValidationException):
    pass


HYPERPARAM_KEYS = (
    "population_size",
    "iterations",
    "mutation_rate",
    "crossover_rate",
    "inertia_or_cooling",
    "selection_pressure",
    "elitism",
)

PSO_COGNITIVE = 1.4
PSO_VELOCITY_FRACTION = 0.2
GA_SIGMA_FRACTION = 0.1
GA_SIGMA_DECAY = 0.97
GA_BLEND_SPREAD = 0.25


def predefined_features(family: AlgoFamily, hp: Dict[str, float]) -> np.ndarray:
    '''[family one-hot (5)] ++ scaled hyperparameters (6); unused slots stay 0'''
    out = np.zeros(LabConstants.FEATURE_LEN_G, dtype=np.float64)
    out[family.index] = 1.0
    out[5] = math.log10(hp["population_size"]) / 3.0
    out[6] = hp.get("mutation_rate", 0.0)
    out[7] = hp.get("crossover_rate", 0.0)
    out[8] = hp.get("inertia_or_cooling", 0.0)
    out[9] = hp.get("selection_pressure", 0.0) / 5.0
    out[10] = 1.0 if hp.get("elitism", 0) else 0.0
    return out


@dataclass(frozen=True, eq=False)
class AlgorithmSpec:
    id: int
    family: AlgoFamily
    hyperparams: Dict[str, float]
    predefined_features: np.ndarray = field(default=None)

    def __post_init__(self):
        hp = self.hyperparams
        unknown = set(hp) - set(HYPERPARAM_KEYS)
        if unknown:
            raise PortfolioException(f"Algorithm {self.id}: unknown hyperparameters {sorted(unknown)}")
        if int(hp.get("iterations", 0)) < 1:
            raise PortfolioException(f"Algorithm {self.id}: iterations must be >= 1")
        min_pop = 4 if self.family.population_based else 1
        if int(hp.get("population_size", 0)) < min_pop:
            raise PortfolioException(f"Algorithm {self.id}: population_size must be >= {min_pop} for {self.family.family_name}")
        if self.predefined_features is None:
            object.__setattr__(self, "predefined_features", predefined_features(self.family, hp))

    @property
    def population_size(self) -> int:
        return int(self.hyperparams["population_size"])

    @property
    def iterations(self) -> int:
        return int(self.hyperparams["iterations"])

    def with_iterations(self, iterations: int) -> "AlgorithmSpec":
        hp = dict(self.hyperparams)
        hp["iterations"] = int(iterations)
        return AlgorithmSpec(self.id, self.family, hp)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "family": self.family.family_name,
            "hyperparams": dict(self.hyperparams),
            "predefined_features": [float(v) for v in self.predefined_features],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AlgorithmSpec":
        try:
            family = AlgoFamily.from_name(data["family"])
            return cls(int(data["id"]), family, dict(data["hyperparams"]))
        except KeyError as e:
            raise PortfolioException(f"Malformed algorithm spec: missing or unknown {e}") from e


class RunResult(NamedTuple):
    best_value: float
    evals_used: int


# -----------------------
# Optimizers
# -----------------------

class _Tracker:
    '''running minimum and evaluation count over one run'''
    def __init__(self, objective: Callable[[np.ndarray], np.ndarray]):
        self.objective = objective
        self.best = math.inf
        self.evals = 0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        f = self.objective(X)
        self.evals += X.shape[0]
        m = float(np.min(f))
        if m < self.best:
            self.best = m
        return f


class BaseOptimizer(ABC):
    def __init__(self, spec: AlgorithmSpec):
        self.spec = spec
        self.hp = spec.hyperparams

    def run(self, problem: ProblemInstance, seed: int) -> RunResult:
        lo = np.asarray(problem.lo, dtype=np.float64)
        hi = np.asarray(problem.hi, dtype=np.float64)
        if np.any(lo >= hi):
            raise PortfolioException(f"Problem {problem.id}: box bounds are not well ordered")
        rng = np.random.default_rng(seed)
        tracker = _Tracker(compile_objective(problem))
        self.optimize(tracker, lo, hi, rng)
        return RunResult(best_value=tracker.best, evals_used=tracker.evals)

    @abstractmethod
    def optimize(self, f: _Tracker, lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator) -> None:
        pass


class DifferentialEvolution(BaseOptimizer):
    '''DE/rand/1/bin with greedy replacement'''

    def optimize(self, f, lo, hi, rng):
        n, d = self.spec.population_size, lo.shape[0]
        F, CR = self.hp["mutation_rate"], self.hp["crossover_rate"]
        X = rng.uniform(lo, hi, size=(n, d))
        fx = f(X)
        rows = np.arange(n)
        for _ in range(self.spec.iterations):
            keys = rng.random((n, n))
            keys[rows, rows] = np.inf
            r = np.argsort(keys, axis=1)[:, :3]
            V = X[r[:, 0]] + F * (X[r[:, 1]] - X[r[:, 2]])
            mask = rng.random((n, d)) < CR
            mask[rows, rng.integers(d, size=n)] = True
            trial = np.clip(np.where(mask, V, X), lo, hi)
            ft = f(trial)
            better = ft <= fx
            X[better] = trial[better]
            fx[better] = ft[better]


class ParticleSwarm(BaseOptimizer):
    '''global-best PSO with constant inertia and velocity clamp'''

    def optimize(self, f, lo, hi, rng):
        n, d = self.spec.population_size, lo.shape[0]
        w, c2 = self.hp["inertia_or_cooling"], self.hp["selection_pressure"]
        vmax = PSO_VELOCITY_FRACTION * (hi - lo)
        X = rng.uniform(lo, hi, size=(n, d))
        V = rng.uniform(-vmax, vmax, size=(n, d))
        fx = f(X)
        P, fp = X.copy(), fx.copy()
        g = P[np.argmin(fp)].copy()
        for _ in range(self.spec.iterations):
            r1 = rng.random((n, d))
            r2 = rng.random((n, d))
            V = np.clip(w * V + PSO_COGNITIVE * r1 * (P - X) + c2 * r2 * (g - X), -vmax, vmax)
            X = np.clip(X + V, lo, hi)
            fx = f(X)
            improved = fx < fp
            P[improved] = X[improved]
            fp[improved] = fx[improved]
            g = P[np.argmin(fp)].copy()


class GeneticAlgorithm(BaseOptimizer):
    '''generational GA: tournament selection, blend crossover, decaying gaussian mutation'''

    @staticmethod
    def _tournament(rng: np.random.Generator, fx: np.ndarray, k: int) -> np.ndarray:
        n = fx.shape[0]
        cand = rng.integers(n, size=(n, k))
        return cand[np.arange(n), np.argmin(fx[cand], axis=1)]

    def optimize(self, f, lo, hi, rng):
        n, d = self.spec.population_size, lo.shape[0]
        k = max(2, int(round(self.hp["selection_pressure"])))
        cx, mut = self.hp["crossover_rate"], self.hp["mutation_rate"]
        elitism = bool(self.hp.get("elitism", 1))
        sigma0 = GA_SIGMA_FRACTION * (hi - lo)
        X = rng.uniform(lo, hi, size=(n, d))
        fx = f(X)
        for t in range(self.spec.iterations):
            p1 = X[self._tournament(rng, fx, k)]
            p2 = X[self._tournament(rng, fx, k)]
            alpha = rng.uniform(-GA_BLEND_SPREAD, 1.0 + GA_BLEND_SPREAD, size=(n, d))
            do_cx = rng.random(n) < cx
            children = np.where(do_cx[:, None], p1 + alpha * (p2 - p1), p1)
            mmask = rng.random((n, d)) < mut
            noise = rng.normal(0.0, 1.0, size=(n, d)) * sigma0 * (GA_SIGMA_DECAY ** t)
            children = np.clip(children + mmask * noise, lo, hi)
            if elitism:
                children[0] = X[np.argmin(fx)]
            X = children
            fx = f(X)


class SimulatedAnnealing(BaseOptimizer):
    '''best-of-neighbourhood proposal with Metropolis acceptance and geometric cooling'''

    def optimize(self, f, lo, hi, rng):
        n, d = self.spec.population_size, lo.shape[0]
        cooling = self.hp["inertia_or_cooling"]
        step0 = self.hp["mutation_rate"] * (hi - lo)
        x = rng.uniform(lo, hi, size=(1, d))
        fcur = float(f(x)[0])
        T0 = 0.1 * (abs(fcur) + 1.0)
        for t in range(self.spec.iterations):
            decay = cooling ** t
            Y = np.clip(x + rng.normal(0.0, 1.0, size=(n, d)) * step0 * decay, lo, hi)
            fy = f(Y)
            j = int(np.argmin(fy))
            u = rng.random()
            delta = float(fy[j]) - fcur
            T = max(T0 * decay, 1e-300)
            if delta < 0 or u < math.exp(-delta / T):
                x = Y[j:j + 1].copy()
                fcur = float(fy[j])


class RandomSearch(BaseOptimizer):
    '''uniform sampling: whole box first, then a contracting box around the incumbent'''

    def optimize(self, f, lo, hi, rng):
        n, d = self.spec.population_size, lo.shape[0]
        contraction = self.hp["inertia_or_cooling"]
        half = 0.5 * (hi - lo)
        X = rng.uniform(lo, hi, size=(n, d))
        fx = f(X)
        j = int(np.argmin(fx))
        best_x, best_f = X[j].copy(), float(fx[j])
        for t in range(1, self.spec.iterations):
            h = half * (contraction ** t)
            X = rng.uniform(np.maximum(lo, best_x - h), np.minimum(hi, best_x + h), size=(n, d))
            fx = f(X)
            j = int(np.argmin(fx))
            if fx[j] < best_f:
                best_x, best_f = X[j].copy(), float(fx[j])


OPTIMIZERS: Dict[AlgoFamily, type] = {
    AlgoFamily.DE: DifferentialEvolution,
    AlgoFamily.PSO: ParticleSwarm,
    AlgoFamily.GA: GeneticAlgorithm,
    AlgoFamily.SA: SimulatedAnnealing,
    AlgoFamily.RANDOM_SEARCH: RandomSearch,
}


def run(algo: AlgorithmSpec, problem: ProblemInstance, seed: int) -> RunResult:
    return OPTIMIZERS[algo.family](algo).run(problem, seed)


# -----------------------
# Portfolio construction
# -----------------------

def _jittered_hyperparams(family: AlgoFamily, rng: np.random.Generator, iterations: int) -> Dict[str, float]:
    hp: Dict[str, float] = {
        "population_size": int(rng.integers(20, 41)),
        "iterations": int(iterations),
    }
    if family is AlgoFamily.DE:
        hp.update(mutation_rate=float(rng.uniform(0.4, 0.8)), crossover_rate=float(rng.uniform(0.6, 0.95)), elitism=1)
    elif family is AlgoFamily.PSO:
        hp.update(inertia_or_cooling=float(rng.uniform(0.55, 0.75)), selection_pressure=float(rng.uniform(1.2, 1.6)), elitism=0)
    elif family is AlgoFamily.GA:
        hp.update(
            selection_pressure=int(rng.integers(2, 6)),
            crossover_rate=float(rng.uniform(0.6, 0.95)),
            mutation_rate=float(rng.uniform(0.05, 0.3)),
            elitism=1,
        )
    elif family is AlgoFamily.SA:
        hp.update(mutation_rate=float(rng.uniform(0.1, 0.3)), inertia_or_cooling=float(rng.uniform(0.95, 0.97)), elitism=0)
    else:
        hp.update(inertia_or_cooling=float(rng.uniform(0.93, 0.96)), elitism=1)
    return hp


def make_portfolio(n: int, seed: int, iterations: int = LabConstants.DEFAULT_ITERATIONS) -> List[AlgorithmSpec]:
    '''
    n specs cycling DE, PSO, GA, SA, RandomSearch. Slot i is seeded from (seed, i) alone,
    so a larger portfolio extends a smaller one with the same prefix.
    '''
    if not 1 <= n <= LabConstants.MAX_PORTFOLIO:
        raise PortfolioException(f"Portfolio size must be in [1, {LabConstants.MAX_PORTFOLIO}], got {n}")
    families = list(AlgoFamily)
    specs: List[AlgorithmSpec] = []
    seen = set()
    for i in range(n):
        family = families[i % len(families)]
        attempt = 0
        while True:
            rng = np.random.default_rng(derive_seed(seed, "algo", i, attempt))
            spec = AlgorithmSpec(i, family, _jittered_hyperparams(family, rng, iterations))
            key = spec.predefined_features.tobytes()
            if key not in seen:
                break
            attempt += 1
        seen.add(key)
        specs.append(spec)
    logger.debug(f"built portfolio of {n} algorithms")
    return specs
