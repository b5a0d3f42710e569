import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivforest import CausalDataset, FeatureSpec, blp, build_design, clan, clate_histogram
from ivforest.exceptions import ConfigError


def test_blp_constant_scores_intercept_only():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 3))
    res = blp(np.full(50, 2.0), X, ["a", "b", "c"])
    assert abs(res.coefficients[0] - 2.0) < 1e-10
    assert np.all(np.abs(res.coefficients[1:]) < 1e-10)


def test_blp_binary_slope_exact():
    x1 = np.array([0.0, 1.0] * 20)
    gamma = 3.0 * x1
    res = blp(gamma, x1[:, None], ["x1"])
    assert abs(res.coefficients[1] - 3.0) < 1e-10
    assert abs(res.coefficients[0]) < 1e-10


def test_blp_matches_normal_equations_oracle():
    # 5-row hand dataset, 2 regressors, explicit (X'X)^-1 X'g solve
    X = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 0.0], [2.0, 1.0], [0.5, 0.5]])
    gamma = np.array([1.0, -0.5, 2.0, 0.3, 0.8])
    D = np.column_stack([np.ones(5), X])
    beta_oracle = np.linalg.solve(D.T @ D, D.T @ gamma)
    res = blp(gamma, X, ["a", "b"])
    assert np.allclose(res.coefficients, beta_oracle, atol=1e-10)


def test_blp_order_invariant():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((120, 2))
    gamma = 1.0 + X[:, 0] + rng.standard_normal(120)
    cl = np.arange(120) % 12
    a = blp(gamma, X, ["a", "b"], cl)
    perm = rng.permutation(120)
    b = blp(gamma[perm], X[perm], ["a", "b"], cl[perm])
    assert np.allclose(a.coefficients, b.coefficients, atol=1e-10)
    assert np.allclose(a.se, b.se, atol=1e-10)


def test_blp_shift_moves_intercept_only():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((80, 2))
    gamma = X[:, 0] + rng.standard_normal(80)
    c = 4.25
    a = blp(gamma, X, ["a", "b"])
    b = blp(gamma + c, X, ["a", "b"])
    assert abs((b.coefficients[0] - a.coefficients[0]) - c) < 1e-10
    assert np.allclose(a.coefficients[1:], b.coefficients[1:], atol=1e-10)


def test_blp_ci_brackets_estimate():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((60, 2))
    gamma = X[:, 0] + rng.standard_normal(60)
    res = blp(gamma, X, ["a", "b"])
    assert (res.ci_low <= res.coefficients).all()
    assert (res.coefficients <= res.ci_high).all()


def test_blp_rank_deficiency_names_columns():
    X = np.zeros((30, 2))
    X[:, 0] = np.arange(30)
    X[:, 1] = 2 * X[:, 0]  # collinear
    with pytest.raises(ConfigError) as err:
        blp(np.arange(30.0), X, ["a", "a_double"])
    assert "a_double" in str(err.value)


# -- CLAN -------------------------------------------------------------------


def test_clan_constant_modifier_zero_diff():
    rng = np.random.default_rng(4)
    gamma = rng.standard_normal(40)
    res = clan(gamma, np.ones((40, 1)), ["const"])
    assert res.diff[0] == 0.0
    assert res.diff_se[0] == 0.0
    assert res.ci_low[0] == res.ci_high[0] == 0.0


def test_clan_separating_modifier():
    # gamma strictly increasing, x1 = 1 exactly on the top half
    gamma = np.arange(16.0)
    x1 = (gamma >= 8).astype(float)
    res = clan(gamma, x1[:, None], ["x1"])
    assert res.mean_most[0] == 1.0
    assert res.mean_least[0] == 0.0
    assert res.diff[0] == 1.0


def test_clan_eight_point_hand_example():
    gamma = np.arange(1.0, 9.0)
    modifier = np.array([0, 0, 0, 0, 1, 0, 1, 1], dtype=float)
    res = clan(gamma, modifier[:, None], ["m"])
    assert res.group_size == 2
    assert res.mean_most[0] == 1.0   # most affected = {7, 8}
    assert res.mean_least[0] == 0.0  # least affected = {1, 2}
    assert res.diff[0] == 1.0


def test_clan_diff_is_mean_difference_exactly():
    rng = np.random.default_rng(5)
    gamma = rng.standard_normal(60)
    M = rng.standard_normal((60, 3))
    res = clan(gamma, M, ["a", "b", "c"])
    assert np.array_equal(res.diff, res.mean_most - res.mean_least)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_clan_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    gamma = rng.standard_normal(24)
    M = rng.standard_normal((24, 2))
    a = clan(gamma, M, ["a", "b"])
    b = clan(np.exp(gamma / 3.0), M, ["a", "b"])  # strictly monotone
    assert np.array_equal(a.mean_most, b.mean_most)
    assert np.array_equal(a.mean_least, b.mean_least)


def test_clan_boundary_ties_flagged():
    gamma = np.array([1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0])
    res = clan(gamma, np.ones((8, 1)), ["m"])
    assert res.boundary_ties


def test_clan_needs_eight():
    with pytest.raises(ConfigError):
        clan(np.arange(7.0), np.ones((7, 1)), ["m"])


# -- histogram ----------------------------------------------------------------


def test_histogram_two_point_masses():
    h = clate_histogram([0.0, 0.0, 1.0, 1.0], bins=2, late=0.5, late_ci=(0.2, 0.8))
    assert h["counts"] == [2, 2]
    assert len(h["edges"]) == 3


def test_histogram_degenerate_range_single_bin():
    h = clate_histogram([1.5] * 10, bins=4, late=1.5, late_ci=(1.0, 2.0))
    assert sum(h["counts"]) == 10
    assert sum(1 for c in h["counts"] if c > 0) == 1


def test_histogram_counts_sum_to_n():
    rng = np.random.default_rng(6)
    tau = rng.standard_normal(137)
    h = clate_histogram(tau, bins=11, late=0.0, late_ci=(-0.1, 0.1))
    assert sum(h["counts"]) == 137
    assert h["zero_line"] == 0.0


def test_histogram_bimodal_dgp():
    # tau in {1, 2} in equal shares: clear modes at the ends, valley between
    rng = np.random.default_rng(7)
    tau = np.concatenate([
        1.0 + 0.05 * rng.standard_normal(300),
        2.0 + 0.05 * rng.standard_normal(300),
    ])
    h = clate_histogram(tau, bins=10, late=1.5, late_ci=(1.4, 1.6))
    counts = np.asarray(h["counts"])
    edges = np.asarray(h["edges"])
    centers = (edges[:-1] + edges[1:]) / 2
    low_mode = counts[np.abs(centers - 1.0) < 0.2].max()
    high_mode = counts[np.abs(centers - 2.0) < 0.2].max()
    middle = counts[np.abs(centers - 1.5) < 0.2].max()
    assert low_mode > 3 * max(middle, 1)
    assert high_mode > 3 * max(middle, 1)


# -- design builder ------------------------------------------------------------


def test_build_design_expands_terciles():
    X = np.array([[1.0, 0.3], [2.0, -0.8], [3.0, 1.2], [2.0, 0.0]])
    ds = CausalDataset(
        features=X, outcome=np.zeros(4), treatment=np.array([0.0, 1.0, 0.0, 1.0]),
        instrument=np.array([0.0, 1.0, 0.0, 1.0]), cluster=np.arange(4),
        feature_specs=(
            FeatureSpec(name="doctors", kind="tercile-coded", tercile_cutpoints=(1.0, 2.0)),
            FeatureSpec(name="age", kind="continuous"),
        ),
    )
    D, names = build_design(ds)
    assert names == ["doctors:q1", "doctors:q2", "age"]
    assert D[:, 0].tolist() == [1.0, 0.0, 0.0, 0.0]
    assert D[:, 1].tolist() == [0.0, 1.0, 0.0, 1.0]  # q3 is the reference
