"""
Random objective functions: expression trees drawn from a weighted operator table,
their post-order (RPN) token form, stack evaluation and fixed-length features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from lab_constants import Operator, OPERATOR_SYMBOLS, LabConstants, LabValidationException
from seeding import derive_seed, parallel_map


# -----------------------
# Exceptions
# -----------------------

class ProblemGenException(LabValidationException):
    pass

class InvalidDistributionException(ProblemGenException):
    '''operator or leaf weights sum to zero'''
    pass


VAR_TOKEN = "var"
CONST_TOKEN = "const"

OPERATOR = "operator"
VARIABLE = "variable"
CONSTANT = "constant"


# -----------------------
# Operator table
# -----------------------

@dataclass(frozen=True)
class OperatorEntry:
    op_id: str
    arity: int
    weight: float


@dataclass(frozen=True)
class OperatorTable:
    '''weighted operator set plus the leaf-kind weights'''
    entries: Tuple[OperatorEntry, ...]
    leaf_var_weight: float = 1.0
    leaf_const_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.op_id not in OPERATOR_SYMBOLS:
                raise ProblemGenException(f'Unknown operator "{e.op_id}"')
            if e.op_id in seen:
                raise ProblemGenException(f'Duplicate operator "{e.op_id}"')
            seen.add(e.op_id)
            if Operator.from_symbol(e.op_id).arity != e.arity:
                raise ProblemGenException(f'Operator "{e.op_id}" has arity {Operator.from_symbol(e.op_id).arity}, got {e.arity}')
            if not math.isfinite(e.weight) or e.weight < 0:
                raise ProblemGenException(f'Operator "{e.op_id}" weight must be finite and >= 0, got {e.weight}')
        for name, w in (("leaf_var_weight", self.leaf_var_weight), ("leaf_const_weight", self.leaf_const_weight)):
            if not math.isfinite(w) or w < 0:
                raise ProblemGenException(f"{name} must be finite and >= 0, got {w}")
        arities = {e.arity for e in self.entries}
        if 1 not in arities or 2 not in arities:
            raise ProblemGenException("Operator table needs at least one unary and one binary operator")

    @classmethod
    def from_weights(cls, weights: Dict[str, float], leaf_var_weight: float = 1.0, leaf_const_weight: float = 0.0) -> "OperatorTable":
        entries = [OperatorEntry(op, Operator.from_symbol(op).arity if op in OPERATOR_SYMBOLS else 0, float(w)) for op, w in weights.items()]
        return cls(tuple(entries), float(leaf_var_weight), float(leaf_const_weight))

    @classmethod
    def default(cls) -> "OperatorTable":
        '''every operator at weight 1; leaves balance internal nodes at roughly one half'''
        return cls.from_weights({op.symbol: 1.0 for op in Operator}, leaf_var_weight=7.0, leaf_const_weight=3.0)

    @property
    def op_ids(self) -> List[str]:
        return [e.op_id for e in self.entries]

    @property
    def op_total(self) -> float:
        return sum(e.weight for e in self.entries)

    @property
    def leaf_total(self) -> float:
        return self.leaf_var_weight + self.leaf_const_weight

    def weight(self, op_id: str) -> float:
        for e in self.entries:
            if e.op_id == op_id:
                return e.weight
        return 0.0

    def vocabulary(self) -> List[str]:
        '''feature vocabulary: var, const, then operators in table order'''
        return [VAR_TOKEN, CONST_TOKEN] + self.op_ids

    def with_weights(self, weights: Dict[str, float]) -> "OperatorTable":
        entries = tuple(OperatorEntry(e.op_id, e.arity, float(weights.get(e.op_id, e.weight))) for e in self.entries)
        return OperatorTable(entries, self.leaf_var_weight, self.leaf_const_weight)

    def check_distribution(self):
        if self.op_total <= 0:
            raise InvalidDistributionException("Operator weights sum to zero")
        if self.leaf_total <= 0:
            raise InvalidDistributionException("Leaf weights sum to zero")

    def to_dict(self) -> dict:
        return {
            "operators": [{"op": e.op_id, "arity": e.arity, "weight": e.weight} for e in self.entries],
            "leaf_var_weight": self.leaf_var_weight,
            "leaf_const_weight": self.leaf_const_weight,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OperatorTable":
        try:
            entries = tuple(OperatorEntry(str(o["op"]), int(o["arity"]), float(o["weight"])) for o in data["operators"])
            return cls(entries, float(data.get("leaf_var_weight", 1.0)), float(data.get("leaf_const_weight", 0.0)))
        except (KeyError, TypeError) as e:
            raise ProblemGenException(f"Malformed operator table: {e}") from e


# -----------------------
# Trees
# -----------------------

@dataclass(frozen=True)
class ExprNode:
    kind: str
    op_id: Optional[str] = None
    var_index: Optional[int] = None  #0-based, token x{index+1}
    value: Optional[float] = None
    children: Tuple["ExprNode", ...] = ()

    @staticmethod
    def op(op_id: str, *children: "ExprNode") -> "ExprNode":
        return ExprNode(OPERATOR, op_id=op_id, children=tuple(children))

    @staticmethod
    def var(index: int) -> "ExprNode":
        return ExprNode(VARIABLE, var_index=index)

    @staticmethod
    def const(value: float) -> "ExprNode":
        return ExprNode(CONSTANT, value=float(value))

    def token(self) -> str:
        if self.kind == OPERATOR:
            return self.op_id
        if self.kind == VARIABLE:
            return f"x{self.var_index + 1}"
        return repr(float(self.value))

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    id: int
    dim: int
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    tree: ExprNode
    rpn: Tuple[str, ...]
    features: np.ndarray
    gen_logprob: float

    def to_record(self) -> dict:
        '''problems.jsonl line; features are rebuilt on load'''
        return {
            "id": self.id,
            "dim": self.dim,
            "lo": list(self.lo),
            "hi": list(self.hi),
            "rpn": list(self.rpn),
            "gen_logprob": self.gen_logprob,
        }


class TreeLogProb(NamedTuple):
    logprob: float
    in_support: bool


def to_rpn(tree: ExprNode) -> List[str]:
    out: List[str] = []
    stack: List[Tuple[ExprNode, bool]] = [(tree, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded or not node.children:
            out.append(node.token())
            continue
        stack.append((node, True))
        for child in reversed(node.children):
            stack.append((child, False))
    return out


def token_kind(token: str) -> str:
    if token in OPERATOR_SYMBOLS:
        return OPERATOR
    if token.startswith("x") and token[1:].isdigit():
        return VARIABLE
    return CONSTANT


def parse_rpn(tokens: Sequence[str]) -> ExprNode:
    stack: List[ExprNode] = []
    for tok in tokens:
        kind = token_kind(tok)
        if kind == OPERATOR:
            arity = Operator.from_symbol(tok).arity
            if len(stack) < arity:
                raise ProblemGenException(f'RPN underflow at operator "{tok}"')
            args = stack[-arity:]
            del stack[-arity:]
            stack.append(ExprNode.op(tok, *args))
        elif kind == VARIABLE:
            idx = int(tok[1:]) - 1
            if idx < 0:
                raise ProblemGenException(f'Bad variable token "{tok}"')
            stack.append(ExprNode.var(idx))
        else:
            try:
                stack.append(ExprNode.const(float(tok)))
            except ValueError as e:
                raise ProblemGenException(f'Bad RPN token "{tok}"') from e
    if len(stack) != 1:
        raise ProblemGenException(f"RPN leaves {len(stack)} values on the stack")
    return stack[0]


# -----------------------
# Evaluation
# -----------------------

def _clamp(v):
    return np.clip(v, -LabConstants.VALUE_CLAMP, LabConstants.VALUE_CLAMP)

OP_FUNCS: Dict[str, Callable[..., np.ndarray]] = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": lambda a, b: a / (np.abs(b) + LabConstants.EVAL_EPS),
    "sin": np.sin,
    "cos": np.cos,
    "log": lambda a: np.log(np.abs(a) + LabConstants.EVAL_EPS),
    "exp": lambda a: np.exp(np.minimum(a, LabConstants.EXP_CLIP)),
    "abs": np.abs,
    "neg": np.negative,
}


def _leaf_values(token: str, X: np.ndarray) -> np.ndarray:
    if token_kind(token) == VARIABLE:
        idx = int(token[1:]) - 1
        if idx >= X.shape[1]:
            raise ProblemGenException(f'Variable "{token}" outside dimension {X.shape[1]}')
        return _clamp(X[:, idx])
    return np.full(X.shape[0], float(token))


def evaluate_rpn_batch(rpn: Sequence[str], X: np.ndarray) -> np.ndarray:
    '''stack machine over a batch of points (rows of X)'''
    stack: List[np.ndarray] = []
    for tok in rpn:
        if tok in OP_FUNCS:
            arity = Operator.from_symbol(tok).arity
            args = stack[-arity:]
            del stack[-arity:]
            stack.append(_clamp(OP_FUNCS[tok](*args)))
        else:
            stack.append(_leaf_values(tok, X))
    return stack[0]


def evaluate_tree(tree: ExprNode, x: Sequence[float]) -> float:
    '''recursive evaluation, the reference the RPN stack machine must agree with'''
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)

    def rec(node: ExprNode) -> np.ndarray:
        if node.kind == OPERATOR:
            return _clamp(OP_FUNCS[node.op_id](*[rec(c) for c in node.children]))
        return _leaf_values(node.token(), X)

    return float(rec(tree)[0])


def evaluate(instance: ProblemInstance, x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != instance.dim:
        raise ProblemGenException(f"Point has dimension {x.shape}, problem {instance.id} expects {instance.dim}")
    return float(evaluate_rpn_batch(instance.rpn, x.reshape(1, -1))[0])


def compile_objective(instance: ProblemInstance) -> Callable[[np.ndarray], np.ndarray]:
    '''vectorised objective over a population matrix (n, dim) -> (n,)'''
    rpn = tuple(instance.rpn)
    dim = instance.dim

    def objective(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != dim:
            raise ProblemGenException(f"Population has {X.shape[1]} columns, expected {dim}")
        return evaluate_rpn_batch(rpn, X)

    return objective


# -----------------------
# Generation and likelihood
# -----------------------

def _node_logprob(table: OperatorTable, dim: int, node: ExprNode, depth: int, max_depth: int) -> Optional[float]:
    '''
    log-probability of the choices made at one node (children excluded).
    None means the node cannot be produced under the table.
    '''
    op_total = table.op_total
    leaf_total = table.leaf_total

    if node.kind == OPERATOR:
        w = table.weight(node.op_id)
        if depth >= max_depth or w <= 0 or op_total <= 0:
            return None
        own = math.log(w / op_total)
        if depth > 1:
            own = math.log(op_total / (op_total + leaf_total)) + own
        return own

    if depth == 1 or leaf_total <= 0:
        return None
    if node.kind == VARIABLE:
        if table.leaf_var_weight <= 0 or node.var_index is None or not 0 <= node.var_index < dim:
            return None
        own = math.log(table.leaf_var_weight / leaf_total) + math.log(1.0 / dim)
    else:
        if table.leaf_const_weight <= 0 or not LabConstants.CONST_LO <= node.value <= LabConstants.CONST_HI:
            return None
        own = math.log(table.leaf_const_weight / leaf_total)
    if depth < max_depth:
        own = math.log(leaf_total / (op_total + leaf_total)) + own
    return own


def tree_logprob(tree: ExprNode, table: OperatorTable, dim: int, max_depth: int) -> TreeLogProb:
    '''natural-log probability of generating tree; -inf with in_support False on a support violation'''

    def rec(node: ExprNode, depth: int) -> Optional[float]:
        own = _node_logprob(table, dim, node, depth, max_depth)
        if own is None:
            return None
        total = own
        for child in node.children:
            c = rec(child, depth + 1)
            if c is None:
                return None
            total += c
        return total

    lp = rec(tree, 1)
    if lp is None:
        return TreeLogProb(-math.inf, False)
    return TreeLogProb(lp, True)


def _draw(rng: np.random.Generator, table: OperatorTable, dim: int, depth: int, max_depth: int) -> Tuple[ExprNode, float]:
    op_total = table.op_total
    leaf_total = table.leaf_total

    if depth == 1:
        internal = True
    elif depth >= max_depth:
        internal = False
    else:
        internal = rng.random() < op_total / (op_total + leaf_total)

    if internal:
        probs = np.array([e.weight for e in table.entries], dtype=np.float64) / op_total
        entry = table.entries[int(rng.choice(len(table.entries), p=probs))]
        drawn = [_draw(rng, table, dim, depth + 1, max_depth) for _ in range(entry.arity)]
        node = ExprNode.op(entry.op_id, *[c for c, _ in drawn])
        total = _node_logprob(table, dim, node, depth, max_depth)
        for _, c_lp in drawn:
            total += c_lp
        return node, total

    if rng.random() < table.leaf_var_weight / leaf_total:
        node = ExprNode.var(int(rng.integers(dim)))
    else:
        node = ExprNode.const(float(rng.uniform(LabConstants.CONST_LO, LabConstants.CONST_HI)))
    return node, _node_logprob(table, dim, node, depth, max_depth)


def sample_tree(table: OperatorTable, dim: int, max_depth: int, seed: int) -> Tuple[ExprNode, float]:
    '''(tree, gen_logprob) without building features'''
    if max_depth < 2:
        raise ProblemGenException(f"max_depth must be >= 2, got {max_depth}")
    if dim < 1:
        raise ProblemGenException(f"dim must be >= 1, got {dim}")
    table.check_distribution()
    rng = np.random.default_rng(seed)
    return _draw(rng, table, dim, 1, max_depth)


def vocab_index(token: str, vocab: OperatorTable) -> int:
    kind = token_kind(token)
    if kind == VARIABLE:
        return 0
    if kind == CONSTANT:
        return 1
    ops = vocab.op_ids
    if token not in ops:
        raise ProblemGenException(f'Operator "{token}" is not in the feature vocabulary')
    return 2 + ops.index(token)


def feature_length(vocab: OperatorTable, L_max: int) -> int:
    V = len(vocab.vocabulary())
    return L_max * V + V


def encode_rpn(rpn: Sequence[str], vocab: OperatorTable, L_max: int = LabConstants.DEFAULT_L_MAX) -> np.ndarray:
    '''
    one-hot token sequence truncated/padded to L_max (padding columns stay zero),
    followed by the normalised histogram over the whole rpn
    '''
    if L_max < 1:
        raise ProblemGenException(f"L_max must be >= 1, got {L_max}")
    V = len(vocab.vocabulary())
    out = np.zeros(L_max * V + V, dtype=np.float64)
    hist = out[L_max * V:]
    for pos, tok in enumerate(rpn):
        j = vocab_index(tok, vocab)
        if pos < L_max:
            out[pos * V + j] = 1.0
        hist[j] += 1.0
    if len(rpn):
        hist /= len(rpn)
    return out


def encode_features(instance: ProblemInstance, vocab: OperatorTable, L_max: int = LabConstants.DEFAULT_L_MAX) -> np.ndarray:
    return encode_rpn(instance.rpn, vocab, L_max)


def build_instance(problem_id: int, dim: int, tree: ExprNode, gen_logprob: float, vocab: OperatorTable,
                   L_max: int = LabConstants.DEFAULT_L_MAX, lo: float = LabConstants.DEFAULT_LO,
                   hi: float = LabConstants.DEFAULT_HI, rpn: Optional[Sequence[str]] = None) -> ProblemInstance:
    if not lo < hi:
        raise ProblemGenException(f"Box bounds not ordered: lo={lo} hi={hi}")
    rpn = tuple(rpn) if rpn is not None else tuple(to_rpn(tree))
    return ProblemInstance(
        id=int(problem_id),
        dim=int(dim),
        lo=tuple([float(lo)] * dim),
        hi=tuple([float(hi)] * dim),
        tree=tree,
        rpn=rpn,
        features=encode_rpn(rpn, vocab, L_max),
        gen_logprob=float(gen_logprob),
    )


def generate_problem(table: OperatorTable, dim: int, max_depth: int, seed: int, problem_id: int = 0,
                     vocab: Optional[OperatorTable] = None, L_max: int = LabConstants.DEFAULT_L_MAX,
                     lo: float = LabConstants.DEFAULT_LO, hi: float = LabConstants.DEFAULT_HI) -> ProblemInstance:
    tree, lp = sample_tree(table, dim, max_depth, seed)
    return build_instance(problem_id, dim, tree, lp, vocab or table, L_max, lo, hi)


@dataclass(frozen=True)
class _GenJob:
    table: OperatorTable
    vocab: OperatorTable
    dim: int
    max_depth: int
    seed: int
    problem_id: int
    L_max: int
    lo: float
    hi: float


def _run_gen_job(job: _GenJob) -> ProblemInstance:
    return generate_problem(job.table, job.dim, job.max_depth, job.seed, job.problem_id,
                            job.vocab, job.L_max, job.lo, job.hi)


def generate_problems(table: OperatorTable, n: int, dim: int, max_depth: int, master_seed: int,
                      first_id: int = 0, jobs: int = 1, vocab: Optional[OperatorTable] = None,
                      L_max: int = LabConstants.DEFAULT_L_MAX, lo: float = LabConstants.DEFAULT_LO,
                      hi: float = LabConstants.DEFAULT_HI) -> List[ProblemInstance]:
    '''n instances with ids first_id.., each seeded from (master_seed, id)'''
    table.check_distribution()
    vocab = vocab or table
    work = [
        _GenJob(table, vocab, dim, max_depth, derive_seed(master_seed, "problem", pid), pid, L_max, lo, hi)
        for pid in range(first_id, first_id + n)
    ]
    return parallel_map(_run_gen_job, work, jobs)


def instance_from_record(record: dict, vocab: OperatorTable, L_max: int = LabConstants.DEFAULT_L_MAX) -> ProblemInstance:
    '''inverse of ProblemInstance.to_record'''
    try:
        rpn = [str(t) for t in record["rpn"]]
        dim = int(record["dim"])
        lo = [float(v) for v in record["lo"]]
        hi = [float(v) for v in record["hi"]]
        gen_logprob = float(record["gen_logprob"])
        pid = int(record["id"])
    except (KeyError, TypeError, ValueError) as e:
        raise ProblemGenException(f"Malformed problem record: {e}") from e
    if len(lo) != dim or len(hi) != dim:
        raise ProblemGenException(f"Problem {pid}: bounds length does not match dim {dim}")
    tree = parse_rpn(rpn)
    return ProblemInstance(
        id=pid,
        dim=dim,
        lo=tuple(lo),
        hi=tuple(hi),
        tree=tree,
        rpn=tuple(rpn),
        features=encode_rpn(rpn, vocab, L_max),
        gen_logprob=gen_logprob,
    )
