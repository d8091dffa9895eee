"""
The four selector families on top of network.py:

  ModelA    pair score from a [PF; AF] input layer (frozen problem features,
            trainable algorithm embeddings), valid only for embedded ids
  ModelB    pair score from problem features ++ predefined algorithm features
  ModelReg  per-algorithm performance regression, select argmin
  ModelCla  per-algorithm softmax classification, select argmax
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from lab_constants import LabConstants, LabValidationException, ModelKind
from bounds import BoundInputs
from expression import ProblemInstance
from labeling import DataSplit, PerformanceMatrix, best_among
from metaheuristics import AlgorithmSpec
from network import Dataset, Layer, MultiHot, Network, NormReport, norms, train
from seeding import derive_seed

logger = logging.getLogger("TRAIN")


class SelectorException(LabValidationException):
    pass

class NoEmbeddingException(SelectorException):
    '''ModelA asked about a problem or algorithm it holds no column for'''
    pass


@dataclass
class SelectionData:
    '''feature lookup shared by every model: problem id -> F vector, algo id -> G vector'''
    features: Dict[int, np.ndarray]
    algo_features: Dict[int, np.ndarray]

    @classmethod
    def from_instances(cls, problems: Sequence[ProblemInstance], portfolio: Sequence[AlgorithmSpec]) -> "SelectionData":
        return cls({p.id: p.features for p in problems}, {a.id: a.predefined_features for a in portfolio})

    @property
    def F(self) -> int:
        return len(next(iter(self.features.values())))

    @property
    def G(self) -> int:
        return len(next(iter(self.algo_features.values())))

    def problem_matrix(self, problem_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.features[p] for p in problem_ids])

    def algo_matrix(self, algo_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.algo_features[a] for a in algo_ids])


@dataclass
class Bindings:
    F: int
    n_algos: int
    G: int = LabConstants.FEATURE_LEN_G
    gamma_margin: float = LabConstants.GAMMA_MARGIN
    problem_ids: List[int] = field(default_factory=list)  #ModelA PF columns
    algo_ids: List[int] = field(default_factory=list)  #trained algorithms, in column/output order

    def __post_init__(self):
        self.problem_ids = [int(p) for p in self.problem_ids]
        self.algo_ids = sorted(int(a) for a in self.algo_ids)
        if self.algo_ids and len(self.algo_ids) != self.n_algos:
            raise SelectorException(f"Bindings list {len(self.algo_ids)} algorithms but n_algos={self.n_algos}")

    def to_dict(self) -> dict:
        return {
            "F": self.F,
            "n_algos": self.n_algos,
            "G": self.G,
            "gamma_margin": self.gamma_margin,
            "problem_ids": self.problem_ids,
            "algo_ids": self.algo_ids,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Bindings":
        return cls(int(data["F"]), int(data["n_algos"]), int(data.get("G", LabConstants.FEATURE_LEN_G)),
                   float(data.get("gamma_margin", LabConstants.GAMMA_MARGIN)),
                   list(data.get("problem_ids", [])), list(data.get("algo_ids", [])))


def bindings_for(kind: ModelKind, data: SelectionData, split: DataSplit,
                 gamma_margin: float = LabConstants.GAMMA_MARGIN, transductive: bool = True) -> Bindings:
    '''ModelA embeds the training problems and, transductively, the test problems (features only)'''
    pids: List[int] = []
    if kind is ModelKind.MODEL_A:
        pids = list(split.train_problem_ids) + (list(split.test_problem_ids) if transductive else [])
    return Bindings(data.F, len(split.train_algo_ids), data.G, gamma_margin, pids, list(split.train_algo_ids))


@dataclass
class TrainHyper:
    epochs: int = LabConstants.DEFAULT_EPOCHS
    lr: float = LabConstants.DEFAULT_LR
    seed: int = 0


@dataclass
class SelectorModel:
    kind: ModelKind
    net: Network
    bindings: Bindings
    width_multiplier: float = 1.0
    gamma_loss: float = LabConstants.GAMMA_BCE
    final_loss: Optional[float] = None

    @property
    def n_problem_columns(self) -> int:
        return len(self.bindings.problem_ids)

    def to_dict(self) -> dict:
        out = self.net.to_dict(meta={"width_multiplier": self.width_multiplier, "gamma_loss": self.gamma_loss,
                                     "final_loss": self.final_loss})
        out["kind"] = self.kind.kind_name
        out["bindings"] = self.bindings.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SelectorModel":
        try:
            kind = ModelKind.from_name(data["kind"])
            bindings = Bindings.from_dict(data["bindings"])
        except KeyError as e:
            raise SelectorException(f"Malformed selector model: missing or unknown {e}") from e
        meta = data.get("meta", {})
        return cls(kind, Network.from_dict(data), bindings, float(meta.get("width_multiplier", 1.0)),
                   float(meta.get("gamma_loss", LabConstants.GAMMA_BCE)), meta.get("final_loss"))


# -----------------------
# Build
# -----------------------

def hidden_widths(k: float) -> List[int]:
    if not LabConstants.MIN_WIDTH_K <= k <= LabConstants.MAX_WIDTH_K:
        raise SelectorException(f"Width multiplier must be in [{LabConstants.MIN_WIDTH_K}, {LabConstants.MAX_WIDTH_K}], got {k}")
    return [int(round(LabConstants.REFERENCE_WIDTH * k))] * LabConstants.REFERENCE_DEPTH


def build(kind: ModelKind, bindings: Bindings, k: float = 1.0, seed: int = 0) -> SelectorModel:
    widths = hidden_widths(k)
    if len(bindings.algo_ids) != bindings.n_algos:
        raise SelectorException("Bindings must list the training algorithm ids")
    acts = ["relu"] * len(widths) + ["identity"]
    F, n_a = bindings.F, bindings.n_algos

    if kind is ModelKind.MODEL_A:
        if not bindings.problem_ids:
            raise SelectorException("ModelA needs the problem ids it embeds")
        n_p = len(bindings.problem_ids)
        rng = np.random.default_rng(derive_seed(seed, "embedding"))
        limit = np.sqrt(6.0 / (F + 1))
        W0 = np.zeros((F, n_p + n_a))
        W0[:, n_p:] = rng.uniform(-limit, limit, size=(F, n_a))
        first = Layer(W0, np.zeros(F), "identity", trainable_bias=False)
        body = Network.build([F] + widths + [1], acts, derive_seed(seed, "body"))
        net = Network([first] + body.layers)
        gamma = LabConstants.GAMMA_BCE
    elif kind is ModelKind.MODEL_B:
        net = Network.build([F + bindings.G] + widths + [1], acts, derive_seed(seed, "body"))
        gamma = LabConstants.GAMMA_BCE
    elif kind is ModelKind.MODEL_REG:
        net = Network.build([F] + widths + [n_a], acts, derive_seed(seed, "body"))
        gamma = 2.0 * LabConstants.TARGET_CLIP
    else:
        net = Network.build([F] + widths + [n_a], acts, derive_seed(seed, "body"))
        gamma = LabConstants.GAMMA_SOFTMAX
    return SelectorModel(kind, net, bindings, k, gamma)


# -----------------------
# Fit
# -----------------------

def _pair_inputs(model: SelectorModel, data: SelectionData, problem_ids: Sequence[int], algo_ids: Sequence[int]):
    '''inputs for every (problem, algorithm) pair, problem-major'''
    b = model.bindings
    if model.kind is ModelKind.MODEL_A:
        pcol = {p: i for i, p in enumerate(b.problem_ids)}
        acol = {a: len(b.problem_ids) + j for j, a in enumerate(b.algo_ids)}
        missing_p = [p for p in problem_ids if p not in pcol]
        if missing_p:
            raise NoEmbeddingException(f"ModelA has no embedding for problem {missing_p[0]}")
        missing_a = [a for a in algo_ids if a not in acol]
        if missing_a:
            raise NoEmbeddingException(f"ModelA has no embedding for algorithm {missing_a[0]}")
        idx = np.array([[pcol[p], acol[a]] for p in problem_ids for a in algo_ids], dtype=np.int64).reshape(-1, 2)
        return MultiHot(idx, len(b.problem_ids) + len(b.algo_ids))
    P = data.problem_matrix(problem_ids)
    A = data.algo_matrix(algo_ids)
    return np.hstack([np.repeat(P, len(algo_ids), axis=0), np.tile(A, (len(problem_ids), 1))])


def regression_targets(perf: PerformanceMatrix, problem_ids: Sequence[int], algo_ids: Sequence[int]) -> np.ndarray:
    '''per-problem z-scores of mean_best over algo_ids, clipped to +-TARGET_CLIP'''
    rows = [perf.row_index(p) for p in problem_ids]
    cols = [perf.col_index(a) for a in algo_ids]
    M = perf.mean_best[np.ix_(rows, cols)]
    mu = M.mean(axis=1, keepdims=True)
    sd = M.std(axis=1, keepdims=True)
    z = np.divide(M - mu, sd, out=np.zeros_like(M), where=sd > 0)
    return np.clip(z, -LabConstants.TARGET_CLIP, LabConstants.TARGET_CLIP)


def fit(model: SelectorModel, data: SelectionData, split: DataSplit, perf: PerformanceMatrix,
        hyper: TrainHyper = TrainHyper()) -> SelectorModel:
    '''trains a copy; ModelA's PF block is written from the features and stays frozen'''
    b = model.bindings
    train_p = list(split.train_problem_ids)
    train_a = list(b.algo_ids)
    if sorted(split.train_algo_ids) != train_a:
        raise SelectorException("Model bindings and split disagree on the training algorithms")
    best_all = best_among(perf, train_a)
    best = np.array([best_all[perf.row_index(p)] for p in train_p])
    net = model.net.copy()
    frozen = None
    gamma = model.gamma_loss

    if model.kind is ModelKind.MODEL_A:
        for j, pid in enumerate(b.problem_ids):
            net.layers[0].W[:, j] = data.features[pid]
        frozen = (0, len(b.problem_ids))

    if model.kind.pairwise:
        X = _pair_inputs(SelectorModel(model.kind, net, b), data, train_p, train_a)
        y = (np.array(train_a)[None, :] == best[:, None]).astype(np.float64).ravel()
        w = np.where(y > 0, max(1.0, len(train_a) - 1.0), 1.0)
        dataset, loss = Dataset(X, y, w), "bce"
    elif model.kind is ModelKind.MODEL_REG:
        targets = regression_targets(perf, train_p, train_a)
        gamma = 2.0 * float(np.max(np.abs(targets))) if targets.size else 0.0
        dataset, loss = Dataset(data.problem_matrix(train_p), targets), "mse"
    else:
        labels = np.array([train_a.index(int(a)) for a in best], dtype=np.float64)
        dataset, loss = Dataset(data.problem_matrix(train_p), labels), "softmax_ce"

    result = train(net, dataset, loss, hyper.epochs, hyper.lr, hyper.seed, frozen_rows=frozen)
    logger.info(f"{model.kind.kind_name}: {len(dataset)} training examples, final loss {result.final_loss:.4f}")
    return SelectorModel(model.kind, result.net, b, model.width_multiplier, gamma, result.final_loss)


# -----------------------
# Select / evaluate
# -----------------------

def score_matrix(model: SelectorModel, data: SelectionData, problem_ids: Sequence[int], algo_ids: Sequence[int]) -> np.ndarray:
    '''
    (P, A) scores, larger is better for every kind (ModelReg returns the negated
    predicted performance). algo_ids must be usable by the model.
    '''
    if model.kind.pairwise:
        out = model.net.forward(_pair_inputs(model, data, problem_ids, algo_ids))
        return out[:, 0].reshape(len(problem_ids), len(algo_ids))
    cols = {a: j for j, a in enumerate(model.bindings.algo_ids)}
    missing = [a for a in algo_ids if a not in cols]
    if missing:
        raise SelectorException(f"{model.kind.kind_name} has no output for algorithm {missing[0]}")
    out = model.net.forward(data.problem_matrix(problem_ids))[:, [cols[a] for a in algo_ids]]
    return -out if model.kind is ModelKind.MODEL_REG else out


class Selection(NamedTuple):
    algo_ids: np.ndarray  #chosen algorithm per problem
    fallback: np.ndarray  #True where unseen candidates were dropped


def select_many(model: SelectorModel, data: SelectionData, problem_ids: Sequence[int],
                candidates: Sequence[int], fallback: bool = False) -> Selection:
    cands = sorted(int(a) for a in candidates)
    if not cands:
        raise SelectorException("Empty candidate set")
    known = set(model.bindings.algo_ids)
    usable = cands if model.kind is ModelKind.MODEL_B else [a for a in cands if a in known]
    dropped = len(usable) < len(cands)
    if model.kind is ModelKind.MODEL_A and dropped and not fallback:
        unseen = [a for a in cands if a not in known]
        raise NoEmbeddingException(f"ModelA has no embedding for algorithm {unseen[0]}")
    if not usable:
        raise NoEmbeddingException(f"{model.kind.kind_name} knows none of the candidates {cands}")
    S = score_matrix(model, data, problem_ids, usable)
    chosen = np.array(usable, dtype=np.int64)[np.argmax(S, axis=1)]
    flag = np.full(len(problem_ids), dropped and model.kind is ModelKind.MODEL_A)
    return Selection(chosen, flag)


def select(model: SelectorModel, data: SelectionData, problem_id: int, candidates: Sequence[int],
           fallback: bool = False) -> int:
    '''best candidate for one problem; argmax score (argmin predicted performance for ModelReg), ties to lowest id'''
    return int(select_many(model, data, [problem_id], candidates, fallback).algo_ids[0])


def margin_loss(margins: Sequence[float], gamma_margin: float) -> float:
    '''fraction of signed margins y*s below gamma_margin'''
    m = np.asarray(margins, dtype=np.float64)
    return float(np.mean(m < gamma_margin)) if m.size else 0.0


class EvalResult(NamedTuple):
    error_S: float
    error_T: float
    gap: float
    margin_loss: Optional[float]
    fallback_count: int


def _error(model, data, perf, problem_ids, algo_ids, fallback) -> Tuple[float, int]:
    if not problem_ids:
        return 0.0, 0
    sel = select_many(model, data, problem_ids, algo_ids, fallback)
    truth_all = best_among(perf, sorted(algo_ids))
    truth = np.array([truth_all[perf.row_index(p)] for p in problem_ids])
    return float(np.mean(sel.algo_ids != truth)), int(sel.fallback.sum())


def evaluate(model: SelectorModel, data: SelectionData, split: DataSplit, perf: PerformanceMatrix,
             fallback: bool = True) -> EvalResult:
    error_S, _ = _error(model, data, perf, split.train_problem_ids, split.train_algo_ids, fallback)
    error_T, n_fallback = _error(model, data, perf, split.test_problem_ids, split.test_algo_ids, fallback)
    k_gamma = None
    if model.kind.pairwise:
        train_a = sorted(split.train_algo_ids)
        S = score_matrix(model, data, split.train_problem_ids, train_a)
        best_all = best_among(perf, train_a)
        best = np.array([best_all[perf.row_index(p)] for p in split.train_problem_ids])
        y = np.where(np.array(train_a)[None, :] == best[:, None], 1.0, -1.0)
        k_gamma = margin_loss((y * S).ravel(), model.bindings.gamma_margin)
    return EvalResult(error_S, error_T, error_T - error_S, k_gamma, n_fallback)


# -----------------------
# Bound inputs
# -----------------------

def loss_lipschitz(model: SelectorModel) -> float:
    return model.gamma_loss


def bound_inputs(model: SelectorModel, data: SelectionData, split: DataSplit,
                 delta: float = LabConstants.DELTA, chi2: float = 0.0) -> BoundInputs:
    '''
    norms and feature statistics of a fitted model. Pair models see x_j = [f_p; g_a]
    over S_P x S_A pairs; Reg/Cla see x_j = f_p.
    '''
    report: NormReport = norms(model.net, first_layer_is_W0=model.kind is not ModelKind.MODEL_B)
    train_p, train_a = list(split.train_problem_ids), sorted(split.train_algo_ids)
    pf_sq = np.sum(data.problem_matrix(train_p) ** 2, axis=1)

    if model.kind is ModelKind.MODEL_A:
        W0 = model.net.layers[0].W
        n_p = len(model.bindings.problem_ids)
        pf_norms = np.linalg.norm(W0[:, :n_p], axis=0)
        af_norms = np.linalg.norm(W0[:, n_p:], axis=0)
        sup_pf_af = float(pf_norms.max() + af_norms.max())
        pcol = {p: i for i, p in enumerate(model.bindings.problem_ids)}
        train_pf = pf_norms[[pcol[p] for p in train_p]]
        emb_sq = train_pf[:, None] ** 2 + af_norms[None, :] ** 2
        sum_sq, max_sq = float(emb_sq.sum()), float(emb_sq.max())
    elif model.kind is ModelKind.MODEL_B:
        af_sq = np.sum(data.algo_matrix(train_a) ** 2, axis=1)
        sum_sq = float(len(train_a) * pf_sq.sum() + len(train_p) * af_sq.sum())
        max_sq = float(pf_sq.max() + af_sq.max())
        sup_pf_af = float(np.sqrt(pf_sq.max()) + np.sqrt(af_sq.max()))
    else:
        sum_sq, max_sq = float(pf_sq.sum()), float(pf_sq.max())
        sup_pf_af = float(np.sqrt(max_sq))

    return BoundInputs(
        S_P=split.S_P, S_A=split.S_A, T_P=split.T_P, T_A=split.T_A,
        delta=delta,
        gamma_loss=model.gamma_loss, gamma_margin=model.bindings.gamma_margin,
        norm=report, sum_sq_norms=sum_sq, max_sq_norm=max_sq, sup_pf_af=sup_pf_af,
        chi2=chi2,
    )
