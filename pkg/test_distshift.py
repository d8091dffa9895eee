import math

import pytest

import distshift
from distshift import DivergenceException, GenerativeConfig
from expression import OperatorTable


def _config(table: OperatorTable, algos=None, dim: int = 2, max_depth: int = 4) -> GenerativeConfig:
    return GenerativeConfig(table, algos or {0: 1.0}, dim, max_depth)


def _sin_only(leaf_var_weight: float) -> OperatorTable:
    #depth 3, one variable: the only trees are sin(x1) and sin(sin(x1))
    return OperatorTable.from_weights({"+": 0.0, "sin": 1.0}, leaf_var_weight=leaf_var_weight, leaf_const_weight=0.0)


# ----------------------------
# categorical
# ----------------------------

def test_uniform_four_against_uniform_five():
    assert distshift.chi2_categorical([1, 1, 1, 1, 0], [1, 1, 1, 1, 1]) == pytest.approx(0.25)

def test_identical_categoricals_have_zero_divergence():
    assert distshift.chi2_categorical({"a": 2, "b": 3}, {"a": 4, "b": 6}) == pytest.approx(0.0, abs=1e-12)

def test_support_violation_is_infinite_unless_smoothed():
    assert math.isinf(distshift.chi2_categorical([1, 1, 1, 1, 1], [1, 1, 1, 1, 0]))
    smoothed = distshift.chi2_categorical([1, 1, 1, 1, 1], [1, 1, 1, 1, 0], eps=0.01)
    assert math.isfinite(smoothed) and smoothed > 0

def test_union_of_keys_is_used():
    assert math.isinf(distshift.chi2_categorical({1: 1.0, 2: 1.0}, {1: 1.0}))

def test_negative_weights_rejected():
    with pytest.raises(DivergenceException):
        distshift.chi2_categorical([1, -1], [1, 1])
    with pytest.raises(DivergenceException):
        distshift.chi2_categorical([1, 1], [1, 1], eps=-0.1)

def test_joint_divergence_of_independent_factors():
    assert distshift.chi2_joint(0.5, 0.25) == pytest.approx(1.5 * 1.25 - 1)
    assert math.isinf(distshift.chi2_joint(0.1, math.inf))


# ----------------------------
# problem generators
# ----------------------------

def test_identical_generators_have_zero_mc_estimate():
    P = _config(OperatorTable.default())
    est = distshift.chi2_problem_mc(P, P, n=300, seed=3)
    assert est.in_support
    assert est.estimate == pytest.approx(0.0, abs=1e-9)

def test_mc_estimate_matches_two_tree_generator():
    P_S = _config(_sin_only(1.0), dim=1, max_depth=3)
    P_T = _config(_sin_only(3.0), dim=1, max_depth=3)
    est = distshift.chi2_problem_mc(P_T, P_S, n=4000, seed=11)
    #P_S = (1/2, 1/2), P_T = (3/4, 1/4)
    assert est.estimate == pytest.approx(0.25, abs=max(0.08, 5 * est.stderr))
    assert est.stderr > 0

def test_mc_estimate_does_not_depend_on_jobs():
    P_S = _config(OperatorTable.default())
    P_T = _config(distshift.apply_problem_shift(OperatorTable.default(), 0.3, seed=1))
    one = distshift.chi2_problem_mc(P_T, P_S, n=200, seed=5, jobs=1)
    two = distshift.chi2_problem_mc(P_T, P_S, n=200, seed=5, jobs=2)
    assert one == two

def test_test_leaves_outside_training_support_are_infinite():
    P_S = _config(OperatorTable.from_weights({"+": 1, "sin": 1}, leaf_var_weight=1, leaf_const_weight=0))
    P_T = _config(OperatorTable.from_weights({"+": 1, "sin": 1}, leaf_var_weight=1, leaf_const_weight=1))
    est = distshift.chi2_problem_mc(P_T, P_S, n=200, seed=0)
    assert not est.in_support
    assert math.isinf(est.estimate)
    assert "constant" in distshift.support_violation(P_T, P_S)

def test_deeper_test_generator_is_outside_support():
    P_S = _config(OperatorTable.default(), max_depth=3)
    P_T = _config(OperatorTable.default(), max_depth=5)
    assert "depth" in distshift.support_violation(P_T, P_S)
    assert distshift.support_violation(P_S, P_T) == ""

def test_mc_needs_enough_draws_and_matching_dims():
    P = _config(OperatorTable.default())
    with pytest.raises(DivergenceException):
        distshift.chi2_problem_mc(P, P, n=50)
    with pytest.raises(DivergenceException):
        distshift.chi2_problem_mc(_config(OperatorTable.default(), dim=3), P, n=200)


# ----------------------------
# shifts
# ----------------------------

def test_problem_shift_scales_ceil_fraction_of_operators():
    table = OperatorTable.default()
    shifted = distshift.apply_problem_shift(table, 0.3, scale=0.1, seed=7)
    weights = [e.weight for e in shifted.entries]
    assert sum(1 for w in weights if w == pytest.approx(0.1)) == 3
    assert sum(1 for w in weights if w == 1.0) == len(weights) - 3
    assert shifted == distshift.apply_problem_shift(table, 0.3, scale=0.1, seed=7)
    assert shifted.leaf_var_weight == table.leaf_var_weight

def test_zero_problem_shift_is_identity():
    table = OperatorTable.default()
    assert distshift.apply_problem_shift(table, 0.0) is table
    with pytest.raises(DivergenceException):
        distshift.apply_problem_shift(table, 1.5)

def test_algo_shift_adds_lowest_unused_ids():
    assert distshift.apply_algo_shift([2, 0, 1], 2, range(6)) == [0, 1, 2, 3, 4]
    assert distshift.apply_algo_shift([0, 2], 1, range(6)) == [0, 1, 2]
    with pytest.raises(DivergenceException):
        distshift.apply_algo_shift([0, 1, 2], 4, range(6))


# ----------------------------
# report
# ----------------------------

def test_report_for_algorithm_shift():
    universe = range(5)
    table = OperatorTable.default()
    P_S = _config(table, distshift.algo_weights_for([0, 1, 2], universe))
    P_T = _config(table, distshift.algo_weights_for([0, 1, 2, 3], universe))
    rep = distshift.divergence_report(P_T, P_S, n=200, seed=0)
    assert math.isinf(rep.chi2_algo)
    assert math.isinf(rep.chi2_joint)
    assert "outside the training support" in rep.reason
    assert rep.to_dict()["chi2_joint"] == "inf"

    smoothed = distshift.divergence_report(P_T, P_S, n=200, seed=0, eps=0.01)
    assert math.isfinite(smoothed.chi2_algo)
    assert smoothed.chi2_problem == pytest.approx(0.0, abs=1e-9)
    assert distshift.DivergenceReport.from_dict(smoothed.to_dict()) == smoothed

def test_generative_config_round_trip_and_validation():
    cfg = _config(OperatorTable.default(), {0: 1.0, 1: 0.0})
    assert GenerativeConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(DivergenceException):
        _config(OperatorTable.default(), {0: 0.0})
    with pytest.raises(DivergenceException):
        distshift.algo_weights_for([9], range(3))
