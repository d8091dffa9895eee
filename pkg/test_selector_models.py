import itertools

import numpy as np
import pytest

import selector_models as sm
from labeling import DataSplit, PerformanceMatrix
from lab_constants import ModelKind
from selector_models import NoEmbeddingException, SelectionData, SelectorException, TrainHyper


# two problem types, two known algorithms; algorithm t is best on type t and
# algorithm 2 (never trained on) sits in between
N_PROBLEMS = 20

def _data() -> SelectionData:
    features = {p: np.eye(2)[p % 2] for p in range(N_PROBLEMS)}
    algo_features = {a: np.eye(3)[a] for a in range(3)}
    return SelectionData(features, algo_features)

def _perf() -> PerformanceMatrix:
    rows = [[0.0, 1.0, 0.5] if p % 2 == 0 else [1.0, 0.0, 0.5] for p in range(N_PROBLEMS)]
    return PerformanceMatrix(list(range(N_PROBLEMS)), [0, 1, 2], np.array(rows), 3)

def _split() -> DataSplit:
    return DataSplit(list(range(16)), list(range(16, N_PROBLEMS)), [0, 1], [0, 1])

def _fitted(kind: ModelKind, epochs: int = 1500):
    data, split, perf = _data(), _split(), _perf()
    model = sm.build(kind, sm.bindings_for(kind, data, split), k=0.25, seed=0)
    return sm.fit(model, data, split, perf, TrainHyper(epochs=epochs, lr=0.1, seed=0)), data, split, perf


def test_hidden_widths_follow_multiplier():
    assert sm.hidden_widths(0.25) == [32, 32, 32]
    assert sm.hidden_widths(2.0) == [256, 256, 256]
    with pytest.raises(SelectorException):
        sm.hidden_widths(3.0)

def test_pair_model_learns_feature_interaction():
    model, data, split, perf = _fitted(ModelKind.MODEL_B)
    result = sm.evaluate(model, data, split, perf)
    assert result.error_S == 0.0
    assert result.error_T == 0.0
    assert result.fallback_count == 0
    assert 0.0 <= result.margin_loss <= 1.0

@pytest.mark.parametrize("kind", [ModelKind.MODEL_REG, ModelKind.MODEL_CLA])
def test_per_algorithm_models_fit_separable_labels(kind):
    model, data, split, perf = _fitted(kind)
    result = sm.evaluate(model, data, split, perf)
    assert result.error_S == 0.0
    assert result.margin_loss is None
    assert sm.select(model, data, 0, [0, 1]) == 0
    assert sm.select(model, data, 1, [0, 1]) == 1

def test_pair_model_scores_unseen_algorithms():
    model, data, split, perf = _fitted(ModelKind.MODEL_B, epochs=50)
    scores = sm.score_matrix(model, data, [0, 1], [0, 1, 2])
    assert scores.shape == (2, 3)
    assert sm.select(model, data, 0, [2]) == 2

def test_embedding_model_needs_known_algorithms():
    model, data, split, perf = _fitted(ModelKind.MODEL_A, epochs=50)
    assert model.n_problem_columns == N_PROBLEMS
    with pytest.raises(NoEmbeddingException):
        sm.select(model, data, 0, [0, 1, 2])
    assert sm.select(model, data, 0, [0, 1, 2], fallback=True) in (0, 1)
    with pytest.raises(NoEmbeddingException):
        sm.select(model, data, 0, [2], fallback=True)
    shifted = split.with_test_algos([0, 1, 2])
    assert sm.evaluate(model, data, shifted, perf).fallback_count == len(split.test_problem_ids)

def test_embedding_model_keeps_problem_block_frozen():
    model, data, split, perf = _fitted(ModelKind.MODEL_A, epochs=50)
    W0 = model.net.layers[0].W
    for j, pid in enumerate(model.bindings.problem_ids):
        assert np.array_equal(W0[:, j], data.features[pid])

def test_inductive_embedding_model_rejects_test_problems():
    data, split, perf = _data(), _split(), _perf()
    bindings = sm.bindings_for(ModelKind.MODEL_A, data, split, transductive=False)
    model = sm.fit(sm.build(ModelKind.MODEL_A, bindings, k=0.25), data, split, perf, TrainHyper(epochs=5))
    with pytest.raises(NoEmbeddingException):
        sm.score_matrix(model, data, [N_PROBLEMS - 1], [0, 1])

def test_fit_rejects_mismatched_algorithms():
    data, split, perf = _data(), _split(), _perf()
    model = sm.build(ModelKind.MODEL_B, sm.bindings_for(ModelKind.MODEL_B, data, split), k=0.25)
    other = DataSplit(split.train_problem_ids, split.test_problem_ids, [0, 2], [0, 2])
    with pytest.raises(SelectorException):
        sm.fit(model, data, other, perf, TrainHyper(epochs=1))

def test_model_round_trip_preserves_scores():
    model, data, split, perf = _fitted(ModelKind.MODEL_CLA, epochs=20)
    again = sm.SelectorModel.from_dict(model.to_dict())
    assert again.kind is ModelKind.MODEL_CLA
    assert again.bindings == model.bindings
    assert np.array_equal(sm.score_matrix(again, data, [0, 1, 2], [0, 1]), sm.score_matrix(model, data, [0, 1, 2], [0, 1]))
    with pytest.raises(SelectorException):
        sm.SelectorModel.from_dict({"kind": "ModelZ", "bindings": {}})

def test_margin_loss():
    assert sm.margin_loss([0.05, 0.2, -1.0], 0.1) == pytest.approx(2 / 3)
    assert sm.margin_loss([], 0.1) == 0.0

def test_bound_inputs_for_pair_model():
    model, data, split, perf = _fitted(ModelKind.MODEL_B, epochs=5)
    inp = sm.bound_inputs(model, data, split, chi2=0.5)
    assert (inp.S_P, inp.S_A, inp.T_P, inp.T_A) == (16, 2, 4, 2)
    #one-hot features: every [f; g] pair has squared norm 2
    assert inp.sum_sq_norms == pytest.approx(2 * 16 * 2)
    assert inp.max_sq_norm == pytest.approx(2.0)
    assert inp.chi2 == 0.5
    assert inp.n_layers == model.net.l
    assert inp.gamma_loss == pytest.approx(0.25)

def test_bound_inputs_for_embedding_model_use_first_layer():
    model, data, split, perf = _fitted(ModelKind.MODEL_A, epochs=5)
    inp = sm.bound_inputs(model, data, split)
    report = inp.norm
    assert inp.w0_norm == pytest.approx(report.spectral[0])
    assert inp.lipschitz == pytest.approx(float(np.prod(report.spectral[1:])))
    assert inp.sup_pf_af > 1.0


# ----------------------------
# selection rule
# ----------------------------

def _scaled_last_layer(model, scale: float, shift: float):
    net = model.net.copy()
    net.layers[-1].W *= scale
    net.layers[-1].b *= scale
    net.layers[-1].b += shift
    return sm.SelectorModel(model.kind, net, model.bindings, model.width_multiplier, model.gamma_loss)

@pytest.mark.parametrize("kind", [ModelKind.MODEL_B, ModelKind.MODEL_REG, ModelKind.MODEL_CLA])
def test_selection_survives_increasing_transform_of_scores(kind):
    model, data, split, perf = _fitted(kind, epochs=200)
    cands = [0, 1, 2] if kind is ModelKind.MODEL_B else [0, 1]
    pids = list(range(N_PROBLEMS))
    scores = sm.score_matrix(model, data, pids, cands)
    chosen = sm.select_many(model, data, pids, cands).algo_ids
    assert chosen.tolist() == [cands[j] for j in np.argmax(np.exp(scores), axis=1)]
    rescaled = _scaled_last_layer(model, 3.0, 1.0)
    assert np.array_equal(sm.select_many(rescaled, data, pids, cands).algo_ids, chosen)

def test_selection_ignores_candidate_order():
    model, data, _, _ = _fitted(ModelKind.MODEL_B, epochs=50)
    for pid in range(N_PROBLEMS):
        first = sm.select(model, data, pid, [0, 1, 2])
        for perm in itertools.permutations([0, 1, 2]):
            assert sm.select(model, data, pid, list(perm)) == first

def test_equal_scores_go_to_lowest_id():
    data, split, perf = _data(), _split(), _perf()
    model = sm.build(ModelKind.MODEL_CLA, sm.bindings_for(ModelKind.MODEL_CLA, data, split), k=0.25)
    model.net.layers[-1].W[:] = 0.0
    model.net.layers[-1].b[:] = 0.0
    assert sm.select(model, data, 0, [1, 0]) == 0
    flat = sm.build(ModelKind.MODEL_REG, sm.bindings_for(ModelKind.MODEL_REG, data, split), k=0.25)
    flat.net.layers[-1].W[:] = 0.0
    flat.net.layers[-1].b[:] = 0.0
    assert sm.select(flat, data, 1, [1, 0]) == 0

def test_pair_model_cannot_tell_identical_algorithms_apart():
    model, data, _, _ = _fitted(ModelKind.MODEL_B, epochs=50)
    twin = SelectionData(data.features, {**data.algo_features, 7: data.algo_features[2].copy()})
    pids = list(range(N_PROBLEMS))
    assert np.array_equal(sm.score_matrix(model, twin, pids, [2]), sm.score_matrix(model, twin, pids, [7]))
    both = sm.score_matrix(model, twin, pids, [2, 7])
    assert both[:, 0] == pytest.approx(both[:, 1], rel=1e-12, abs=1e-12)

def test_label_independent_selector_errs_like_a_random_guess():
    rng = np.random.default_rng(21)
    n_p, n_a = 2010, 10
    data = SelectionData({p: rng.normal(size=3) for p in range(n_p)}, {a: rng.normal(size=3) for a in range(n_a)})
    perf = PerformanceMatrix(list(range(n_p)), list(range(n_a)), rng.uniform(size=(n_p, n_a)), 1)
    split = DataSplit(list(range(10)), list(range(10, n_p)), list(range(n_a)), list(range(n_a)))
    model = sm.build(ModelKind.MODEL_B, sm.bindings_for(ModelKind.MODEL_B, data, split), k=0.25, seed=4)
    assert sm.evaluate(model, data, split, perf).error_T == pytest.approx(1 - 1 / n_a, abs=0.03)


# ----------------------------
# embedding width
# ----------------------------

def test_embedding_width_depends_on_transductive_mode():
    rng = np.random.default_rng(22)
    data = SelectionData({p: rng.normal(size=3) for p in range(120)}, {a: rng.normal(size=3) for a in range(5)})
    split = DataSplit(list(range(100)), list(range(100, 120)), list(range(5)), list(range(5)))
    inductive = sm.build(ModelKind.MODEL_A, sm.bindings_for(ModelKind.MODEL_A, data, split, transductive=False), k=0.25)
    assert inductive.net.layers[0].in_dim == 100 + 5
    transductive = sm.build(ModelKind.MODEL_A, sm.bindings_for(ModelKind.MODEL_A, data, split), k=0.25)
    assert transductive.net.layers[0].in_dim == 100 + 20 + 5
