"""
Closed-form generalization bounds for the selector families, evaluated from the
explicit (pre big-O) expressions. Every report itemizes its additive terms and
the constants used, and never turns a vacuous bound into a finite number.

All unannotated logarithms are natural logs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

from lab_constants import LabConstants, LabValidationException, ModelKind
from network import NormReport

logger = logging.getLogger("BOUNDS")


class BoundsException(LabValidationException):
    pass


THM1 = "thm1"
COR1 = "cor1"
THM2 = "thm2"
COR2_REG = "cor2_reg"
COR2_CLA = "cor2_cla"
THM3 = "thm3"
THM4 = "thm4"
COR4 = "cor4"
COR5 = "cor5"

ETA_REASON = "partition ratio eta = |T_P|/|S_P| must be < 1 (training set larger than test set)"


@dataclass
class BoundInputs:
    '''
    counts, norms and feature statistics a bound is evaluated from. L, ||W0||_2,
    Gamma_f and the layer count default to the values in norm when one is given.
    '''
    S_P: int
    S_A: int
    T_P: int
    T_A: int
    delta: float = LabConstants.DELTA
    gamma_loss: float = LabConstants.GAMMA_BCE
    gamma_margin: float = LabConstants.GAMMA_MARGIN
    norm: Optional[NormReport] = None
    lipschitz: Optional[float] = None
    w0_norm: Optional[float] = None
    gamma_f: Optional[float] = None
    n_layers: Optional[int] = None
    sum_sq_norms: float = 0.0  #sum_j ||x_j||^2 over S
    max_sq_norm: float = 0.0  #Gamma_S
    sup_pf_af: float = 0.0
    chi2: float = 0.0
    p_transductive: float = 0.5  #recorded only; no final bound depends on it
    eta: float = field(init=False)

    def __post_init__(self):
        if self.norm is not None:
            if self.lipschitz is None:
                self.lipschitz = self.norm.lipschitz_upper
            if self.w0_norm is None:
                self.w0_norm = self.norm.w0_spectral if self.norm.w0_spectral is not None else self.norm.spectral[0]
            if self.gamma_f is None:
                self.gamma_f = self.norm.frob_product
            if self.n_layers is None:
                self.n_layers = len(self.norm.spectral)
        self.lipschitz = 1.0 if self.lipschitz is None else float(self.lipschitz)
        self.w0_norm = 1.0 if self.w0_norm is None else float(self.w0_norm)
        self.gamma_f = 1.0 if self.gamma_f is None else float(self.gamma_f)
        self.n_layers = 1 if self.n_layers is None else int(self.n_layers)
        if min(self.S_P, self.S_A) < 1:
            raise BoundsException(f"Training counts must be positive: S_P={self.S_P} S_A={self.S_A}")
        if min(self.T_P, self.T_A) < 0:
            raise BoundsException(f"Test counts must be non-negative: T_P={self.T_P} T_A={self.T_A}")
        if not 0.0 < self.delta <= 1.0:
            raise BoundsException(f"delta must be in (0, 1], got {self.delta}")
        if not self.chi2 >= 0.0:
            raise BoundsException(f"chi2 must be >= 0, got {self.chi2}")
        if not 0.0 <= self.p_transductive <= 0.5:
            raise BoundsException(f"p must be in [0, 1/2], got {self.p_transductive}")
        self.eta = self.T_P / self.S_P

    @property
    def S(self) -> int:
        return self.S_P * self.S_A

    @property
    def T(self) -> int:
        return self.T_P * self.T_A

    def to_dict(self) -> dict:
        return {
            "S_P": self.S_P, "S_A": self.S_A, "T_P": self.T_P, "T_A": self.T_A,
            "eta": self.eta, "delta": self.delta,
            "gamma_loss": self.gamma_loss, "gamma_margin": self.gamma_margin,
            "lipschitz": self.lipschitz, "w0_norm": self.w0_norm, "gamma_f": self.gamma_f,
            "n_layers": self.n_layers, "sum_sq_norms": self.sum_sq_norms, "max_sq_norm": self.max_sq_norm,
            "sup_pf_af": self.sup_pf_af, "chi2": self.chi2, "p_transductive": self.p_transductive,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoundInputs":
        known = {"S_P", "S_A", "T_P", "T_A", "delta", "gamma_loss", "gamma_margin", "lipschitz", "w0_norm",
                 "gamma_f", "n_layers", "sum_sq_norms", "max_sq_norm", "sup_pf_af", "chi2", "p_transductive"}
        unknown = set(data) - known - {"eta"}
        if unknown:
            raise BoundsException(f"Unknown bound inputs {sorted(unknown)}")
        kw = {k: v for k, v in data.items() if k in known}
        if isinstance(kw.get("chi2"), str):
            kw["chi2"] = float(kw["chi2"])
        try:
            return cls(**kw)
        except TypeError as e:
            raise BoundsException(f"Malformed bound inputs: {e}") from e


@dataclass
class BoundReport:
    kind: str
    value: Optional[float]
    terms: Dict[str, float] = field(default_factory=dict)
    constants: Dict[str, float] = field(default_factory=dict)
    applicable: bool = True
    reason: str = ""

    @property
    def slack(self) -> Optional[float]:
        '''value minus the empirical error term, if any'''
        if self.value is None:
            return None
        return self.value - self.terms.get("error_S", 0.0)

    def to_dict(self) -> dict:
        def num(v):
            if v is None:
                return None
            return v if math.isfinite(v) else repr(float(v))
        return {
            "kind": self.kind,
            "value": num(self.value),
            "terms": {k: num(v) for k, v in self.terms.items()},
            "constants": {k: num(v) for k, v in self.constants.items()},
            "applicable": self.applicable,
            "reason": self.reason,
        }


def _report(kind: str, terms: Dict[str, float], constants: Dict[str, float]) -> BoundReport:
    return BoundReport(kind, sum(terms.values()), terms, constants)


def _inapplicable(kind: str, reason: str, constants: Optional[Dict[str, float]] = None) -> BoundReport:
    logger.warning(f"{kind} not applicable: {reason}")
    return BoundReport(kind, None, {}, constants or {}, applicable=False, reason=reason)


# -----------------------
# Constants
# -----------------------

def c0() -> float:
    return math.sqrt(32.0 * math.log(4.0 * math.e) / 3.0)


def c1(gamma_margin: float, delta: float) -> float:
    '''sqrt(log(log2(4/gamma))) + sqrt(log(1/delta)); needs 0 < gamma < 2'''
    return math.sqrt(math.log(math.log2(4.0 / gamma_margin))) + math.sqrt(math.log(1.0 / delta))


# -----------------------
# Transductive
# -----------------------

def _transductive_complexity(kind: str, inp: BoundInputs, w0_like: float) -> BoundReport:
    S, T = inp.S, inp.T
    if S <= 0 or T <= 0:
        raise BoundsException(f"{kind} needs positive pair counts, got |S|={S} |T|={T}")
    value = inp.gamma_loss * inp.lipschitz * w0_like * (S + T) / (S * T)
    return _report(kind, {"complexity": value},
                   {"gamma": inp.gamma_loss, "L": inp.lipschitz, "w0_or_sup": w0_like, "S": S, "T": T})


def thm1_transductive_complexity(inp: BoundInputs) -> BoundReport:
    return _transductive_complexity(THM1, inp, inp.w0_norm)


def cor1_transductive_complexity(inp: BoundInputs) -> BoundReport:
    return _transductive_complexity(COR1, inp, inp.sup_pf_af)


def _transductive_bound(kind: str, error_S: float, gamma_lip_w0: float, n_train: int, n_test: int,
                        eta: float, delta: float, extra: Dict[str, float]) -> BoundReport:
    constants = {"c0": c0(), "eta": eta, "delta": delta, "n_train": n_train, "n_test": n_test, **extra}
    if eta >= 1.0:
        return _inapplicable(kind, ETA_REASON, constants)
    if n_train <= 0 or n_test <= 0 or eta <= 0:
        raise BoundsException(f"{kind} needs positive train/test counts")
    terms = {
        "error_S": float(error_S),
        "term1": gamma_lip_w0 * (1.0 + eta) / (eta * n_train),
        "term2": c0() * (1.0 + eta) / math.sqrt(eta * n_train),
        "term3": math.sqrt((1.0 + eta) * math.log(1.0 / delta) / (2.0 * n_test)),
    }
    return _report(kind, terms, constants)


def thm2_transductive_bound(inp: BoundInputs, error_S: float) -> BoundReport:
    g = inp.gamma_loss * inp.lipschitz * inp.w0_norm
    return _transductive_bound(THM2, error_S, g, inp.S, inp.T, inp.eta, inp.delta,
                               {"gamma": inp.gamma_loss, "L": inp.lipschitz, "w0": inp.w0_norm})


def cor2_bounds(inp: BoundInputs, error_S: float, which: str) -> BoundReport:
    '''per-problem samples (|S_P|, |T_P|); the classification variant carries an extra |S_A| factor'''
    if which not in ("reg", "cla"):
        raise BoundsException(f'cor2 variant must be "reg" or "cla", got "{which}"')
    factor = inp.S_A if which == "cla" else 1
    g = factor * inp.gamma_loss * inp.lipschitz * inp.w0_norm
    kind = COR2_CLA if which == "cla" else COR2_REG
    return _transductive_bound(kind, error_S, g, inp.S_P, inp.T_P, inp.eta, inp.delta,
                               {"gamma": inp.gamma_loss, "L": inp.lipschitz, "w0": inp.w0_norm, "S_A_factor": factor})


# -----------------------
# Inductive
# -----------------------

def thm3_inductive_complexity(inp: BoundInputs) -> BoundReport:
    if inp.gamma_f <= 0 or inp.sum_sq_norms < 0:
        raise BoundsException("thm3 needs Gamma_f > 0 and a non-negative feature norm sum")
    sigma = inp.sum_sq_norms
    linear = 2.0 * inp.n_layers * math.log(2.0) * inp.gamma_f * sigma
    quadratic = 2.0 * inp.gamma_f ** 2 * sigma ** 1.5
    value = math.sqrt(linear + quadratic) / inp.S
    return _report(THM3, {"complexity": value},
                   {"l": inp.n_layers, "gamma_f": inp.gamma_f, "sum_sq_norms": sigma, "S": inp.S,
                    "inner_linear": linear, "inner_quadratic": quadratic})


def _margin_bound(kind: str, inp: BoundInputs, error_S: float, gamma_S: float, extra: Dict[str, float]) -> BoundReport:
    gm = inp.gamma_margin
    if gm <= 0:
        raise BoundsException(f"gamma_margin must be > 0, got {gm}")
    constants = {"gamma_margin": gm, "delta": inp.delta, "l": inp.n_layers, "gamma_f": inp.gamma_f,
                 "Gamma_S": gamma_S, "S": inp.S, **extra}
    if gm >= 2.0:
        return _inapplicable(kind, "c1 undefined: gamma_margin must be < 2", constants)
    S = inp.S
    root_S = math.sqrt(S)
    inner = math.log(2.0) * inp.n_layers * inp.gamma_f * gamma_S + inp.gamma_f ** 2 * gamma_S ** 1.5 * root_S
    constants["c1"] = c1(gm, inp.delta)
    terms = {
        "error_S": float(error_S),
        "complexity": 4.0 * math.sqrt(2.0) / (root_S * gm) * math.sqrt(inner),
        "confidence": constants["c1"] / root_S,
    }
    return _report(kind, terms, constants)


def thm4_inductive_bound(inp: BoundInputs, error_S: float) -> BoundReport:
    return _margin_bound(THM4, inp, error_S, inp.max_sq_norm, {})


def cor4_simplified(inp: BoundInputs) -> BoundReport:
    '''large-sample rate 4*sqrt(2)*Gamma_f*Gamma_S^(3/4) / (|S|^(1/4) * gamma_margin)'''
    value = 4.0 * math.sqrt(2.0) * inp.gamma_f * inp.max_sq_norm ** 0.75 / (inp.S ** 0.25 * inp.gamma_margin)
    return _report(COR4, {"rate": value}, {"gamma_f": inp.gamma_f, "Gamma_S": inp.max_sq_norm, "S": inp.S})


def cor5_shifted_bound(inp: BoundInputs, error_S: float) -> BoundReport:
    '''thm4 with Gamma_S inflated to (chi2 + 1) * Gamma_S'''
    if math.isinf(inp.chi2):
        return _inapplicable(COR5, "bound vacuous: test support exceeds training support", {"chi2": inp.chi2})
    gamma_hat = (inp.chi2 + 1.0) * inp.max_sq_norm
    return _margin_bound(COR5, inp, error_S, gamma_hat,
                         {"chi2": inp.chi2, "Gamma_S_raw": inp.max_sq_norm,
                          "chi2_growth": (inp.chi2 + 1.0) ** 0.75})


def bound_for_model(kind: ModelKind, inp: BoundInputs, error_S: float) -> BoundReport:
    '''the bound a row reports: transductive for A/Reg/Cla, inductive (shift-aware) for B'''
    if kind is ModelKind.MODEL_A:
        return thm2_transductive_bound(inp, error_S)
    if kind is ModelKind.MODEL_REG:
        return cor2_bounds(inp, error_S, "reg")
    if kind is ModelKind.MODEL_CLA:
        return cor2_bounds(inp, error_S, "cla")
    if inp.chi2 == 0.0:
        return thm4_inductive_bound(inp, error_S)
    return cor5_shifted_bound(inp, error_S)


def all_bounds(inp: BoundInputs, error_S: float) -> Dict[str, BoundReport]:
    '''every report for one input set, keyed by kind (bounds subcommand)'''
    has_T, has_TP = inp.T > 0, inp.T_P > 0
    out = {
        THM1: thm1_transductive_complexity(inp) if has_T else None,
        COR1: cor1_transductive_complexity(inp) if has_T else None,
        THM2: thm2_transductive_bound(inp, error_S) if has_T else None,
        COR2_REG: cor2_bounds(inp, error_S, "reg") if has_TP else None,
        COR2_CLA: cor2_bounds(inp, error_S, "cla") if has_TP else None,
        THM3: thm3_inductive_complexity(inp),
        THM4: thm4_inductive_bound(inp, error_S),
        COR4: cor4_simplified(inp),
        COR5: cor5_shifted_bound(inp, error_S),
    }
    return {k: v for k, v in out.items() if v is not None}
