"""
Layered feed-forward network with 1-Lipschitz activations, exact reverse-mode
gradients, plain SGD training and spectral/Frobenius norm introspection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from lab_constants import LabConstants, LabRuntimeException, LabValidationException

logger = logging.getLogger("TRAIN")


class NetworkException(LabValidationException):
    pass

class TrainingDivergedException(LabRuntimeException):
    pass


# -----------------------
# Activations
# -----------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out

#name -> (phi, dphi/dz evaluated at the pre-activation)
ACTIVATIONS: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass(frozen=True)
class MultiHot:
    '''
    batch of multi-hot inputs given by their active columns: row i is the 0/1 vector
    with ones at indices[i]. Layer 0 gathers weight columns instead of multiplying.
    '''
    indices: np.ndarray  #(batch, k) ints
    width: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def take(self, rows: np.ndarray) -> "MultiHot":
        return MultiHot(self.indices[rows], self.width)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.indices.shape[0], self.width))
        np.add.at(out, (np.arange(self.indices.shape[0])[:, None], self.indices), 1.0)
        return out


Inputs = Union[np.ndarray, MultiHot]


@dataclass
class Layer:
    W: np.ndarray  #(out, in)
    b: np.ndarray  #(out,)
    activation: str = "relu"
    trainable_bias: bool = True

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise NetworkException(f"Layer shapes do not match: W {self.W.shape}, b {self.b.shape}")
        if self.activation not in ACTIVATIONS:
            raise NetworkException(f'Unknown activation "{self.activation}"')
        if not np.all(np.isfinite(self.W)) or not np.all(np.isfinite(self.b)):
            raise NetworkException("Layer weights must be finite")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "Layer":
        return Layer(self.W.copy(), self.b.copy(), self.activation, self.trainable_bias)


class LayerGrad(NamedTuple):
    dW: np.ndarray
    db: np.ndarray


class Network:
    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise NetworkException("Network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise NetworkException(
                    f"Layer {i} expects {layers[i].in_dim} inputs but layer {i - 1} produces {layers[i - 1].out_dim}"
                )
        self.layers: List[Layer] = list(layers)

    @classmethod
    def build(cls, sizes: Sequence[int], activations: Sequence[str], seed: int,
              first_bias: bool = True) -> "Network":
        '''sizes = [in, h1, ..., out]; glorot-uniform weights, zero biases'''
        if len(activations) != len(sizes) - 1:
            raise NetworkException("Need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(W, np.zeros(fan_out), activations[i], trainable_bias=(first_bias or i > 0)))
        return cls(layers)

    @property
    def l(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def n_params(self) -> int:
        return sum(L.W.size + (L.b.size if L.trainable_bias else 0) for L in self.layers)

    def copy(self) -> "Network":
        return Network([L.copy() for L in self.layers])

    def _first_preact(self, x: Inputs) -> np.ndarray:
        L0 = self.layers[0]
        if isinstance(x, MultiHot):
            if x.width != L0.in_dim:
                raise NetworkException(f"Multi-hot width {x.width} does not match input size {L0.in_dim}")
            return L0.W.T[x.indices].sum(axis=1) + L0.b
        if x.shape[1] != L0.in_dim:
            raise NetworkException(f"Input has {x.shape[1]} features, network expects {L0.in_dim}")
        return x @ L0.W.T + L0.b

    def forward_cache(self, x: Inputs) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
        '''output plus the (pre-activation, activation) memory of every layer'''
        memory = []
        a: Optional[np.ndarray] = None
        for i, L in enumerate(self.layers):
            z = self._first_preact(x) if i == 0 else a @ L.W.T + L.b
            a = ACTIVATIONS[L.activation][0](z)
            memory.append((z, a))
        return a, memory

    def forward(self, x: Inputs) -> np.ndarray:
        single = not isinstance(x, MultiHot) and np.ndim(x) == 1
        X = x if isinstance(x, MultiHot) else np.atleast_2d(np.asarray(x, dtype=np.float64))
        out, _ = self.forward_cache(X)
        return out[0] if single else out

    def backward(self, x: Inputs, dloss_dout: np.ndarray) -> List[LayerGrad]:
        '''gradients of sum_i <dloss_dout[i], f(x_i)> with respect to every W and b'''
        single = not isinstance(x, MultiHot) and np.ndim(x) == 1
        X = x if isinstance(x, MultiHot) else np.atleast_2d(np.asarray(x, dtype=np.float64))
        out, memory = self.forward_cache(X)
        dout = np.atleast_2d(np.asarray(dloss_dout, dtype=np.float64)) if single else np.asarray(dloss_dout, dtype=np.float64)
        if dout.shape != out.shape:
            raise NetworkException(f"Upstream gradient has shape {dout.shape}, output is {out.shape}")

        grads: List[Optional[LayerGrad]] = [None] * self.l
        da = dout
        for i in range(self.l - 1, -1, -1):
            L = self.layers[i]
            z, _ = memory[i]
            dz = ACTIVATIONS[L.activation][1](z) * da
            db = dz.sum(axis=0) if L.trainable_bias else np.zeros_like(L.b)
            if i > 0:
                a_prev = memory[i - 1][1]
                dW = dz.T @ a_prev
                da = dz @ L.W
            elif isinstance(X, MultiHot):
                dWT = np.zeros((L.in_dim, L.out_dim))
                np.add.at(dWT, X.indices, dz[:, None, :])
                dW = dWT.T
            else:
                dW = dz.T @ X
            grads[i] = LayerGrad(dW, db)
        return grads

    def to_dict(self, meta: Optional[dict] = None) -> dict:
        return {
            "layers": [
                {
                    "rows": L.out_dim,
                    "cols": L.in_dim,
                    "weights": L.W.ravel().tolist(),
                    "bias": L.b.tolist(),
                    "activation": L.activation,
                    "trainable_bias": L.trainable_bias,
                }
                for L in self.layers
            ],
            "meta": meta or {},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        try:
            layers = [
                Layer(
                    np.array(d["weights"], dtype=np.float64).reshape(int(d["rows"]), int(d["cols"])),
                    np.array(d["bias"], dtype=np.float64),
                    d["activation"],
                    bool(d.get("trainable_bias", True)),
                )
                for d in data["layers"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise NetworkException(f"Malformed network: {e}") from e
        return cls(layers)


def forward(net: Network, x: Inputs) -> np.ndarray:
    return net.forward(x)


def backward(net: Network, x: Inputs, dloss_dout: np.ndarray) -> List[LayerGrad]:
    return net.backward(x, dloss_dout)


# -----------------------
# Losses
# -----------------------

def _bce(out: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    s = out[:, 0]
    loss = np.logaddexp(0.0, s) - y * s
    grad = (_sigmoid(s) - y)[:, None]
    return loss, grad

def _mse(out: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    diff = out - y
    return np.mean(diff ** 2, axis=1), 2.0 * diff / out.shape[1]

def _softmax_ce(out: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    shifted = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(out.shape[0])
    labels = y.astype(np.int64)
    loss = logz - shifted[rows, labels]
    grad = np.exp(shifted - logz[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad

LOSSES = {"bce": _bce, "mse": _mse, "softmax_ce": _softmax_ce}


@dataclass
class Dataset:
    X: Inputs
    y: np.ndarray
    weights: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.X) if isinstance(self.X, MultiHot) else self.X.shape[0]

    def take(self, rows: np.ndarray) -> "Dataset":
        X = self.X.take(rows) if isinstance(self.X, MultiHot) else self.X[rows]
        w = None if self.weights is None else self.weights[rows]
        return Dataset(X, self.y[rows], w)


def loss_and_grad(net: Network, data: Dataset, loss: str) -> Tuple[float, List[LayerGrad]]:
    out, _ = net.forward_cache(data.X)
    per_example, dout = LOSSES[loss](out, data.y)
    w = np.ones(len(data)) if data.weights is None else data.weights
    total_w = float(w.sum())
    value = float(np.dot(w, per_example) / total_w)
    grads = net.backward(data.X, dout * (w / total_w)[:, None])
    return value, grads


def dataset_loss(net: Network, data: Dataset, loss: str) -> float:
    out, _ = net.forward_cache(data.X)
    per_example, _ = LOSSES[loss](out, data.y)
    w = np.ones(len(data)) if data.weights is None else data.weights
    return float(np.dot(w, per_example) / w.sum())


class TrainResult(NamedTuple):
    net: Network
    losses: List[float]  #per-epoch mean loss seen during the pass
    final_loss: float


def train(net: Network, data: Dataset, loss: str = "bce", epochs: int = LabConstants.DEFAULT_EPOCHS,
          lr: float = LabConstants.DEFAULT_LR, seed: int = 0,
          frozen_rows: Optional[Tuple[int, int]] = None) -> TrainResult:
    '''
    plain SGD on a copy of net. frozen_rows = (start, stop) input indices of layer 0
    whose weight columns never change (the frozen block of the first layer).
    '''
    if len(data) == 0:
        raise NetworkException("Cannot train on an empty dataset")
    if loss not in LOSSES:
        raise NetworkException(f'Unknown loss "{loss}"')
    net = net.copy()
    rng = np.random.default_rng(seed)
    n = len(data)
    batch = n if n <= LabConstants.FULL_BATCH_LIMIT else LabConstants.MINIBATCH
    losses: List[float] = []

    for epoch in range(epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch):
            part = data if batch == n else data.take(order[start:start + batch])
            value, grads = loss_and_grad(net, part, loss)
            if not math.isfinite(value):
                raise TrainingDivergedException(f"Training loss became non-finite at epoch {epoch}")
            epoch_losses.append(value)
            for i, (L, g) in enumerate(zip(net.layers, grads)):
                dW = g.dW
                if i == 0 and frozen_rows is not None:
                    dW = dW.copy()
                    dW[:, frozen_rows[0]:frozen_rows[1]] = 0.0
                L.W -= lr * dW
                if L.trainable_bias:
                    L.b -= lr * g.db
        losses.append(float(np.mean(epoch_losses)))

    final = dataset_loss(net, data, loss)
    if not math.isfinite(final):
        raise TrainingDivergedException("Final training loss is non-finite")
    logger.info(f"trained {net.l}-layer net for {epochs} epochs, final {loss} loss {final:.4f}")
    return TrainResult(net, losses, final)


# -----------------------
# Norms
# -----------------------

class SpectralEstimate(NamedTuple):
    value: float
    iterations: int
    converged: bool


def spectral_norm(W: np.ndarray, iters: int = 100, tol: float = 1e-6) -> SpectralEstimate:
    '''
    largest singular value by power iteration on the smaller Gram matrix,
    accelerated by repeated squaring; Rayleigh quotient of the dominant column
    '''
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise NetworkException("spectral_norm of an empty matrix")
    fro = float(np.linalg.norm(W))
    if fro == 0.0:
        return SpectralEstimate(0.0, 0, True)
    G = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    M = G / np.linalg.norm(G)
    prev = None
    value = fro
    for it in range(1, iters + 1):
        j = int(np.argmax(np.einsum("ij,ij->j", M, M)))
        v = M[:, j] / np.linalg.norm(M[:, j])
        value = min(math.sqrt(max(float(v @ G @ v), 0.0)), fro)
        if prev is not None and abs(value - prev) <= tol * value:
            return SpectralEstimate(value, it, True)
        prev = value
        M = M @ M
        M /= np.linalg.norm(M)
    logger.warning(f"power iteration stopped after {iters} iterations without converging")
    return SpectralEstimate(value, iters, False)


class NormReport(NamedTuple):
    spectral: List[float]
    frobenius: List[float]
    lipschitz_upper: float  #L
    frob_product: float  #Gamma_f
    w0_spectral: Optional[float]
    converged: bool


def norms(net: Network, first_layer_is_W0: bool = False) -> NormReport:
    '''biases never enter the products'''
    estimates = [spectral_norm(L.W) for L in net.layers]
    spectral = [e.value for e in estimates]
    frobenius = [float(np.linalg.norm(L.W)) for L in net.layers]
    lip_layers = spectral[1:] if first_layer_is_W0 else spectral
    return NormReport(
        spectral=spectral,
        frobenius=frobenius,
        lipschitz_upper=float(np.prod(lip_layers)) if lip_layers else 1.0,
        frob_product=float(np.prod(frobenius)),
        w0_spectral=spectral[0] if first_layer_is_W0 else None,
        converged=all(e.converged for e in estimates),
    )
