import json
from itertools import product

import numpy as np
import pytest

from ivforest import learn_depth2, policy_value
from ivforest.exceptions import ConfigError
from ivforest.policy import candidate_thresholds


def brute_force_best(X, gamma):
    """Oracle: enumerate every depth-<=2 tree and all 16 leaf-action combos."""
    n, p = X.shape
    thr = {f: candidate_thresholds(X[:, f]) for f in range(p)}
    best = -np.inf
    for a in (0, 1):
        best = max(best, policy_value(np.full(n, a), gamma))
    sides = [(None, None)] + [(f, t) for f in range(p) for t in thr[f]]
    for f0 in range(p):
        for t0 in thr[f0]:
            mask_l = X[:, f0] <= t0
            for fl, tl in sides:
                for fr, tr in sides:
                    leaf = np.zeros(n, dtype=int)
                    if fl is None:
                        leaf[mask_l] = 0
                    else:
                        leaf[mask_l] = np.where(X[mask_l, fl] <= tl, 0, 1)
                    if fr is None:
                        leaf[~mask_l] = 2
                    else:
                        leaf[~mask_l] = np.where(X[~mask_l, fr] <= tr, 2, 3)
                    for acts in product((0, 1), repeat=4):
                        pi = np.asarray(acts)[leaf]
                        v = policy_value(pi, gamma)
                        if v > best:
                            best = v
    return best


def test_policy_value_hand_sums():
    gamma = np.array([1.0, -2.0, 3.0])
    assert policy_value(np.ones(3), gamma) == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert policy_value(np.zeros(3), gamma) == pytest.approx(-np.mean(gamma), abs=1e-12)
    pi = (gamma > 0).astype(float)
    assert policy_value(pi, gamma) == pytest.approx(2.0, abs=1e-12)


def test_policy_value_upper_bound():
    rng = np.random.default_rng(0)
    gamma = rng.standard_normal(40)
    pi = (gamma > 0).astype(float)
    assert policy_value(pi, gamma) == pytest.approx(np.mean(np.abs(gamma)), abs=1e-12)


def test_all_positive_scores_treat_everywhere():
    X = np.array([[0.0], [1.0], [0.0], [1.0]])
    gamma = np.array([0.5, 1.0, 2.0, 0.1])
    tree = learn_depth2(X, gamma)
    assert tree.root is None
    assert set(tree.actions) == {1}
    assert tree.value_estimate == float(np.mean(gamma))


def test_depth1_split_on_single_binary_feature():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    gamma = np.array([-1.0, -1.0, 2.0, 2.0])
    tree = learn_depth2(X, gamma)
    assert tree.value_estimate == pytest.approx(1.5, abs=0)
    assert tree.root is not None and tree.root.threshold == 0.5
    assert tree.assign(X).tolist() == [0, 0, 1, 1]


def test_exact_against_brute_force_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        n = int(rng.integers(8, 51))
        p = int(rng.integers(1, 5))
        X = rng.integers(0, 2, size=(n, p)).astype(float)
        gamma = rng.standard_normal(n) * rng.uniform(0.5, 3.0)
        tree = learn_depth2(X, gamma)
        assert tree.value_estimate == brute_force_best(X, gamma)


def test_exact_against_brute_force_eight_point_two_feature():
    # optimum requires a depth-2 structure: split x1, then x2 on the right
    X = np.array([
        [0, 0], [0, 1], [0, 0], [0, 1],
        [1, 0], [1, 0], [1, 1], [1, 1],
    ], dtype=float)
    gamma = np.array([-1.0, -1.0, -1.0, -1.0, 3.0, 3.0, -2.0, -2.0])
    tree = learn_depth2(X, gamma)
    assert tree.value_estimate == brute_force_best(X, gamma)
    assert tree.value_estimate == pytest.approx((4 + 6 + 4) / 8.0, abs=1e-12)


def test_rescaling_invariance_of_argmax():
    rng = np.random.default_rng(5)
    X = rng.integers(0, 3, size=(40, 3)).astype(float)
    gamma = rng.standard_normal(40)
    a = learn_depth2(X, gamma)
    b = learn_depth2(X, 2.5 * gamma)
    assert np.array_equal(a.assign(X), b.assign(X))
    assert b.value_estimate == pytest.approx(2.5 * a.value_estimate, rel=1e-12)


def test_constant_shift_value_identity():
    rng = np.random.default_rng(6)
    gamma = rng.standard_normal(30)
    pi = (rng.uniform(size=30) < 0.4).astype(float)
    c = 1.7
    shifted = policy_value(pi, gamma + c)
    assert shifted == pytest.approx(
        policy_value(pi, gamma) + c * (2 * pi.mean() - 1), abs=1e-12
    )


def test_value_at_least_treat_all_or_none():
    rng = np.random.default_rng(7)
    for _ in range(10):
        X = rng.standard_normal((30, 2))
        gamma = rng.standard_normal(30)
        tree = learn_depth2(X, gamma)
        assert tree.value_estimate >= policy_value(np.ones(30), gamma) - 1e-12
        assert tree.value_estimate >= policy_value(np.zeros(30), gamma) - 1e-12


def test_treatment_cost_shifts_scores():
    X = np.array([[0.0], [1.0]])
    gamma = np.array([0.4, 0.4])
    free = learn_depth2(X, gamma)
    costly = learn_depth2(X, gamma, treatment_cost=1.0)
    assert set(free.actions) == {1}
    assert set(costly.actions) == {0}  # net scores negative, treat no one


def test_thresholds_are_midpoints():
    t = candidate_thresholds([3.0, 1.0, 2.0, 2.0])
    assert t.tolist() == [1.5, 2.5]
    assert candidate_thresholds([5.0, 5.0]).size == 0


def test_json_export_round_trip(tmp_path):
    X = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 0.0], [1.0, 1.0]] * 3, dtype=float)
    gamma = np.array([1.0, -1.0, 0.5, -0.5] * 3)
    tree = learn_depth2(X, gamma, feature_names=["urban", "java"])
    path = tmp_path / "tree.json"
    tree.save_json(path)
    payload = json.loads(path.read_text())
    assert payload["value_estimate"] == tree.value_estimate
    node = payload["tree"]
    if not node["leaf"]:
        assert node["feature"] in ("urban", "java")
        assert node["left"]["action"] in ("treat", "control")


def test_empty_inputs_rejected():
    with pytest.raises(ConfigError):
        learn_depth2(np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ConfigError):
        policy_value(np.zeros(3), np.zeros(4))
