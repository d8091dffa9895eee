import numpy as np
import pytest

import network
from network import Dataset, Layer, MultiHot, Network, NetworkException, TrainingDivergedException


def _numeric_grad(net: Network, data: Dataset, loss: str, layer: int, i: int, j: int, h: float = 1e-6) -> float:
    W = net.layers[layer].W
    old = W[i, j]
    W[i, j] = old + h
    up = network.dataset_loss(net, data, loss)
    W[i, j] = old - h
    down = network.dataset_loss(net, data, loss)
    W[i, j] = old
    return (up - down) / (2 * h)


@pytest.mark.parametrize("loss,out_dim,acts", [
    ("mse", 2, ["tanh", "tanh", "identity"]),
    ("bce", 1, ["sigmoid", "tanh", "identity"]),
    ("softmax_ce", 3, ["tanh", "sigmoid", "identity"]),
])
def test_backward_matches_finite_differences(loss, out_dim, acts):
    rng = np.random.default_rng(0)
    net = Network.build([4, 5, 3, out_dim], acts, seed=1)
    X = rng.normal(size=(6, 4))
    if loss == "mse":
        y = rng.normal(size=(6, out_dim))
    elif loss == "bce":
        y = rng.integers(0, 2, size=6).astype(float)
    else:
        y = rng.integers(0, out_dim, size=6).astype(float)
    data = Dataset(X, y, weights=rng.uniform(0.5, 2.0, size=6))
    _, grads = network.loss_and_grad(net, data, loss)
    for layer in range(net.l):
        for i, j in [(0, 0), (net.layers[layer].out_dim - 1, net.layers[layer].in_dim - 1)]:
            assert grads[layer].dW[i, j] == pytest.approx(_numeric_grad(net, data, loss, layer, i, j), rel=1e-4, abs=1e-7)

def _numeric_param_grad(net: Network, data: Dataset, loss: str, param: np.ndarray, idx, h: float = 1e-6) -> float:
    old = param[idx]
    param[idx] = old + h
    up = network.dataset_loss(net, data, loss)
    param[idx] = old - h
    down = network.dataset_loss(net, data, loss)
    param[idx] = old
    return (up - down) / (2 * h)

def _random_case(rng: np.random.Generator, seed: int):
    loss = ("mse", "bce", "softmax_ce")[seed % 3]
    out_dim = {"mse": 2, "bce": 1, "softmax_ce": 3}[loss]
    sizes = [int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), out_dim]
    acts = [str(a) for a in rng.choice(["relu", "tanh", "sigmoid"], size=2)] + ["identity"]
    net = Network.build(sizes, acts, seed=seed)
    n = 5
    X = rng.normal(size=(n, sizes[0]))
    if loss == "mse":
        y = rng.normal(size=(n, out_dim))
    else:
        y = rng.integers(0, max(out_dim, 2), size=n).astype(float)
    return net, Dataset(X, y), loss

def test_backward_matches_finite_differences_on_random_nets():
    rng = np.random.default_rng(12)
    for seed in range(50):
        net, data, loss = _random_case(rng, seed)
        assert net.n_params() <= 64
        _, grads = network.loss_and_grad(net, data, loss)
        for L, g in zip(net.layers, grads):
            for idx in np.ndindex(*L.W.shape):
                assert g.dW[idx] == pytest.approx(_numeric_param_grad(net, data, loss, L.W, idx), rel=1e-4, abs=1e-7)
            for i in range(L.b.shape[0]):
                assert g.db[i] == pytest.approx(_numeric_param_grad(net, data, loss, L.b, i), rel=1e-4, abs=1e-7)

def test_multi_hot_matches_dense_input():
    net = Network.build([5, 4, 1], ["relu", "identity"], seed=2)
    x = MultiHot(np.array([[0, 3], [1, 2], [4, 0]]), 5)
    dense = x.dense()
    assert np.allclose(net.forward(x), net.forward(dense))
    up = np.ones((3, 1))
    for g_sparse, g_dense in zip(net.backward(x, up), net.backward(dense, up)):
        assert np.allclose(g_sparse.dW, g_dense.dW)
        assert np.allclose(g_sparse.db, g_dense.db)

def test_single_example_forward():
    net = Network.build([3, 2], ["identity"], seed=0)
    assert net.forward(np.zeros(3)).shape == (2,)

def test_shape_mismatches_rejected():
    with pytest.raises(NetworkException):
        Network([Layer(np.zeros((3, 2)), np.zeros(3)), Layer(np.zeros((1, 4)), np.zeros(1))])
    with pytest.raises(NetworkException):
        Layer(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(NetworkException):
        Layer(np.zeros((1, 1)), np.zeros(1), "swish")
    net = Network.build([3, 1], ["identity"], seed=0)
    with pytest.raises(NetworkException):
        net.forward(np.zeros((2, 4)))


# ----------------------------
# training
# ----------------------------

def test_training_reduces_loss():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(64, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    net = Network.build([2, 8, 1], ["relu", "identity"], seed=0)
    result = network.train(net, Dataset(X, y), "bce", epochs=200, lr=0.2, seed=0)
    assert result.final_loss < result.losses[0]
    assert result.final_loss < 0.4
    assert result.net is not net

def test_frozen_columns_never_move():
    rng = np.random.default_rng(4)
    net = Network.build([4, 3, 1], ["tanh", "identity"], seed=5)
    data = Dataset(rng.normal(size=(10, 4)), rng.normal(size=(10, 1)))
    result = network.train(net, data, "mse", epochs=20, lr=0.1, frozen_rows=(0, 2))
    assert np.array_equal(result.net.layers[0].W[:, :2], net.layers[0].W[:, :2])
    assert not np.array_equal(result.net.layers[0].W[:, 2:], net.layers[0].W[:, 2:])

def test_divergent_training_raises():
    rng = np.random.default_rng(6)
    net = Network.build([2, 1], ["identity"], seed=0)
    data = Dataset(rng.normal(size=(20, 2)) * 10, rng.normal(size=(20, 1)))
    with pytest.raises(TrainingDivergedException):
        with np.errstate(all="ignore"):
            network.train(net, data, "mse", epochs=2000, lr=10.0)

def test_train_rejects_empty_data_and_unknown_loss():
    net = Network.build([2, 1], ["identity"], seed=0)
    with pytest.raises(NetworkException):
        network.train(net, Dataset(np.zeros((0, 2)), np.zeros(0)), "mse")
    with pytest.raises(NetworkException):
        network.train(net, Dataset(np.zeros((2, 2)), np.zeros(2)), "hinge")

def test_serialised_network_computes_the_same_function():
    net = Network.build([3, 4, 2], ["relu", "identity"], seed=7, first_bias=False)
    again = Network.from_dict(net.to_dict(meta={"k": 1}))
    X = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(net.forward(X), again.forward(X))
    assert not again.layers[0].trainable_bias
    with pytest.raises(NetworkException):
        Network.from_dict({"layers": [{"rows": 2}]})


# ----------------------------
# norms
# ----------------------------

def test_spectral_norm_matches_svd():
    rng = np.random.default_rng(8)
    for shape in [(7, 4), (4, 7), (12, 12), (1, 5)]:
        W = rng.normal(size=shape)
        est = network.spectral_norm(W)
        assert est.converged
        assert est.value == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-5)

def test_spectral_norm_special_matrices():
    assert network.spectral_norm(np.zeros((3, 3))).value == 0.0
    u, v = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
    assert network.spectral_norm(np.outer(u, v)).value == pytest.approx(15.0)
    with pytest.raises(NetworkException):
        network.spectral_norm(np.zeros((0, 3)))

def test_norm_report_products():
    net = Network([
        Layer(np.diag([2.0, 1.0]), np.zeros(2), "identity"),
        Layer(np.array([[3.0, 4.0]]), np.zeros(1), "identity"),
    ])
    full = network.norms(net)
    assert full.spectral == pytest.approx([2.0, 5.0])
    assert full.lipschitz_upper == pytest.approx(10.0)
    assert full.frob_product == pytest.approx(np.sqrt(5.0) * 5.0)
    assert full.w0_spectral is None
    split = network.norms(net, first_layer_is_W0=True)
    assert split.lipschitz_upper == pytest.approx(5.0)
    assert split.w0_spectral == pytest.approx(2.0)

def test_spectral_norm_matches_svd_on_random_square_matrices():
    rng = np.random.default_rng(13)
    for _ in range(100):
        W = rng.normal(size=(8, 8))
        est = network.spectral_norm(W)
        assert est.value == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-6)
        assert est.value <= np.linalg.norm(W) * (1 + 1e-12)


# ----------------------------
# lipschitz properties
# ----------------------------

@pytest.mark.parametrize("name", sorted(network.ACTIVATIONS))
def test_activations_are_one_lipschitz(name):
    phi, _ = network.ACTIVATIONS[name]
    rng = np.random.default_rng(14)
    a, b = rng.normal(scale=5.0, size=(2, 10000))
    assert np.all(np.abs(phi(a) - phi(b)) <= np.abs(a - b) * (1 + 1e-12))

def test_network_respects_its_lipschitz_bound():
    rng = np.random.default_rng(15)
    for seed in range(20):
        acts = [str(a) for a in rng.choice(["relu", "tanh", "sigmoid"], size=2)] + ["identity"]
        net = Network.build([4, 6, 5, 3], acts, seed=seed)
        report = network.norms(net)
        assert report.lipschitz_upper <= report.frob_product * (1 + 1e-12)
        for s, f in zip(report.spectral, report.frobenius):
            assert s <= f * (1 + 1e-12)
        x, y = rng.normal(size=(2, 50, 4))
        lhs = np.linalg.norm(net.forward(x) - net.forward(y), axis=1)
        rhs = report.lipschitz_upper * np.linalg.norm(x - y, axis=1)
        assert np.all(lhs <= rhs * (1 + 1e-9))
