import numpy as np
import pytest

from ivforest import (
    CausalDataset,
    FeatureSpec,
    ForestParams,
    DgpSpec,
    doubly_robust_scores,
    fit_nuisances,
    generate,
    predict_clates,
    residualize,
    solve_local_2sls,
)
from ivforest.clate import ClateResult, Residuals, cluster_se_of_mean
from ivforest.nuisance import NuisanceSet
from ivforest.exceptions import WeakIdentificationError


def _resid_from_raw(y, d, z, w=None):
    """Residualize against (weighted) means, the 'constants' nuisance."""
    if w is None:
        w = np.full(len(y), 1.0 / len(y))
    return Residuals(
        y_res=y - np.sum(w * y), d_res=d - np.sum(w * d), z_res=z - np.sum(w * z)
    )


def _oracle_wald(y, d, z, w):
    """Independent covariance-ratio evaluation on the raw values."""
    num = np.sum(w * z * y) - np.sum(w * z) * np.sum(w * y)
    den = np.sum(w * z * d) - np.sum(w * z) * np.sum(w * d)
    return num / den


def test_wald_hand_example():
    y = np.array([3.0, 1.0, 1.0, 1.0])
    d = np.array([1.0, 0.0, 0.0, 0.0])
    z = np.array([1.0, 1.0, 0.0, 0.0])
    tau = solve_local_2sls(np.full(4, 0.25), _resid_from_raw(y, d, z))
    assert abs(tau - 2.0) < 1e-12


def test_wald_perfect_compliance_unit_effect():
    z = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    d = z.copy()
    y = d.copy()
    tau = solve_local_2sls(np.full(6, 1 / 6), _resid_from_raw(y, d, z))
    assert abs(tau - 1.0) < 1e-12


def test_wald_zero_denominator_raises():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    d = np.zeros(4)  # no treatment variation at all
    z = np.array([1.0, 0.0, 1.0, 0.0])
    with pytest.raises(WeakIdentificationError) as err:
        solve_local_2sls(np.full(4, 0.25), _resid_from_raw(y, d, z))
    assert err.value.denominator is not None


def test_wald_matches_covariance_ratio_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = int(rng.integers(6, 40))
        y = rng.standard_normal(n) * rng.uniform(0.5, 4)
        z = (rng.uniform(size=n) < 0.5).astype(float)
        if z.min() == z.max():
            z[0] = 1 - z[0]
        d = np.where(z == 1, rng.uniform(size=n) < 0.8, rng.uniform(size=n) < 0.2).astype(float)
        w = rng.uniform(0.1, 1.0, size=n)
        w /= w.sum()
        resid = _resid_from_raw(y, d, z, w)
        try:
            tau = solve_local_2sls(w, resid)
        except WeakIdentificationError:
            continue
        assert abs(tau - _oracle_wald(y, d, z, w)) < 1e-10


# -- forest path ------------------------------------------------------------


def _oracle_nuisances(sd, e_const, g_const, delta_const):
    n = sd.data.n_obs
    X = sd.data.features
    m = X[:, 0] + 0.5 * X[:, 1] + sd.tau_true * e_const
    return NuisanceSet(
        m_hat=m, e_hat=np.full(n, e_const), g_hat=np.full(n, g_const),
        delta_hat=np.full(n, delta_const),
    )


def test_constant_effect_recovery():
    sd = generate(DgpSpec(n=2000, n_clusters=250, p=4, tau_fn="constant",
                          tau_params={"value": 0.5}, compliance="one_sided",
                          rate_z1=0.9, rate_z0=0.1, noise_sd=0.5, seed=3))
    params = ForestParams(num_trees=300, seed=17)
    nuis = _oracle_nuisances(sd, 0.5, 0.5, 0.8)
    clates = predict_clates(sd.data, nuis, params)
    assert abs(float(np.mean(clates.tau_hat)) - 0.5) <= 0.1
    ok = ~clates.weak_flags
    assert np.isfinite(clates.tau_hat).all()
    assert (clates.se[ok] > 0).all()


def test_predict_matches_weights_solve():
    # contract: the forest CLATE equals solve_local_2sls on its OOB weights
    sd = generate(DgpSpec(n=400, n_clusters=40, p=3, tau_fn="constant",
                          compliance="one_sided", rate_z1=0.85, rate_z0=0.15,
                          noise_sd=0.5, seed=5))
    params = ForestParams(num_trees=60, seed=23)
    nuis = _oracle_nuisances(sd, 0.5, 0.5, 0.7)
    clates = predict_clates(sd.data, nuis, params)
    resid = residualize(sd.data, nuis)
    for i in (3, 77, 250):
        if clates.weak_flags[i]:
            continue
        w = clates.forest.weights_at(sd.data.features[i], exclude_trees_containing=i)
        tau_w = solve_local_2sls(w, resid)
        assert abs(tau_w - clates.tau_hat[i]) < 1e-9


def test_translation_equivariance_bit_exact():
    sd = generate(DgpSpec(n=600, n_clusters=60, p=3, tau_fn="constant",
                          compliance="one_sided", rate_z1=0.9, rate_z0=0.1,
                          noise_sd=0.5, seed=6))
    params = ForestParams(num_trees=40, seed=29)
    nuis = _oracle_nuisances(sd, 0.5, 0.5, 0.8)
    c = 17.5
    shifted = CausalDataset(
        features=sd.data.features, outcome=sd.data.outcome + c,
        treatment=sd.data.treatment, instrument=sd.data.instrument,
        cluster=sd.data.cluster, feature_specs=sd.data.feature_specs,
    )
    nuis_shifted = NuisanceSet(
        m_hat=nuis.m_hat + c, e_hat=nuis.e_hat, g_hat=nuis.g_hat,
        delta_hat=nuis.delta_hat,
    )
    a = predict_clates(sd.data, nuis, params)
    b = predict_clates(shifted, nuis_shifted, params)
    # (Y+c) - (m+c) differs from Y - m only by addition rounding (~1e-15);
    # the pipeline consumes (Y, m) solely through that residual
    assert np.allclose(a.tau_hat, b.tau_hat, rtol=0, atol=1e-8)
    assert np.array_equal(a.weak_flags, b.weak_flags)


def test_causal_mode_bit_identical_when_instrument_is_treatment():
    sd = generate(DgpSpec(n=500, n_clusters=50, p=3, tau_fn="constant",
                          compliance="perfect", noise_sd=0.5, seed=7))
    assert np.array_equal(sd.data.treatment, sd.data.instrument)
    params = ForestParams(num_trees=50, seed=31)
    nuis = _oracle_nuisances(sd, 0.5, 0.5, 1.0)
    nuis.g_hat = nuis.e_hat.copy()  # Z == D implies g == e
    a = predict_clates(sd.data, nuis, params, mode="instrumental")
    b = predict_clates(sd.data, nuis, params, mode="causal")
    assert np.array_equal(a.tau_hat, b.tau_hat)


def test_weak_identification_flagged_not_fatal():
    sd = generate(DgpSpec(n=400, n_clusters=40, p=3, tau_fn="constant",
                          compliance="one_sided", rate_z1=0.9, rate_z0=0.1,
                          noise_sd=0.5, seed=8))
    params = ForestParams(num_trees=30, seed=37)
    nuis = _oracle_nuisances(sd, 0.5, 0.5, 0.8)
    clates = predict_clates(sd.data, nuis, params, weak_floor=1e3)  # flag everything
    assert clates.weak_flags.all()
    assert np.isfinite(clates.tau_hat).all()
    assert np.isnan(clates.se).all()


# -- doubly robust scores ----------------------------------------------------


def _tiny_dataset(y, d, z, cluster=None):
    n = len(y)
    if cluster is None:
        cluster = np.arange(n)
    return CausalDataset(
        features=np.zeros((n, 1)), outcome=np.asarray(y, float),
        treatment=np.asarray(d, float), instrument=np.asarray(z, float),
        cluster=cluster, feature_specs=(FeatureSpec(name="x1"),),
    )


def _fake_clates(tau, mode="instrumental"):
    tau = np.asarray(tau, float)
    return ClateResult(
        tau_hat=tau, se=np.ones_like(tau), weak_flags=np.zeros(len(tau), bool),
        denominator=np.ones_like(tau), n_admissible=np.ones(len(tau), int),
        params=ForestParams(num_trees=2, seed=0), mode=mode,
    )


def test_gamma_hand_example():
    # Z=1, g=0.5, delta=1, tau=0, m=0, e=0.5, D=1, Y=1 -> gamma = 2
    data = _tiny_dataset(y=[1.0, 0.0], d=[1.0, 0.0], z=[1.0, 0.0])
    nuis = NuisanceSet(
        m_hat=np.zeros(2), e_hat=np.full(2, 0.5), g_hat=np.full(2, 0.5),
        delta_hat=np.ones(2),
    )
    scores = doubly_robust_scores(data, nuis, _fake_clates([0.0, 0.0]))
    assert abs(scores.gamma[0] - 2.0) < 1e-12


def test_gamma_reduces_to_tau_when_augmentation_vanishes():
    # construct Y - m - (D - e) tau = 0 exactly
    tau = np.array([1.5, -0.5, 2.0])
    d = np.array([1.0, 0.0, 1.0])
    e = np.full(3, 0.25)
    m = np.array([0.3, -0.1, 0.2])
    y = m + (d - e) * tau
    data = _tiny_dataset(y=y, d=d, z=[1.0, 0.0, 1.0])
    nuis = NuisanceSet(m_hat=m, e_hat=e, g_hat=np.full(3, 0.5), delta_hat=np.ones(3))
    scores = doubly_robust_scores(data, nuis, _fake_clates(tau))
    assert np.allclose(scores.gamma, tau, atol=1e-12)


def test_mean_gamma_equals_late_exactly():
    rng = np.random.default_rng(9)
    n = 100
    data = _tiny_dataset(
        y=rng.standard_normal(n),
        d=(rng.uniform(size=n) < 0.5).astype(float),
        z=(rng.uniform(size=n) < 0.5).astype(float),
        cluster=np.arange(n) % 10,
    )
    nuis = NuisanceSet(
        m_hat=rng.standard_normal(n), e_hat=np.full(n, 0.4),
        g_hat=np.full(n, 0.5), delta_hat=np.full(n, 0.5),
    )
    scores = doubly_robust_scores(data, nuis, _fake_clates(rng.standard_normal(n)))
    assert scores.late == float(np.mean(scores.gamma))


def test_delta_floor_applied_and_counted():
    data = _tiny_dataset(y=[1.0, 2.0], d=[1.0, 0.0], z=[1.0, 0.0])
    nuis = NuisanceSet(
        m_hat=np.zeros(2), e_hat=np.full(2, 0.5), g_hat=np.full(2, 0.5),
        delta_hat=np.array([0.01, -0.02]),  # both under the 0.05 floor
    )
    scores = doubly_robust_scores(data, nuis, _fake_clates([0.0, 0.0]))
    assert scores.n_floored_delta == 2
    assert np.isfinite(scores.gamma).all()
    # floored magnitudes: denominators are +-0.05
    assert abs(scores.gamma[0] - (0.5 / 0.25) / 0.05 * 1.0) < 1e-9


def test_cluster_se_of_mean_against_brute_force():
    rng = np.random.default_rng(10)
    v = rng.standard_normal(60)
    cl = np.repeat(np.arange(12), 5)
    se = cluster_se_of_mean(v, cl)
    sums = np.array([np.sum(v[cl == g] - v.mean()) for g in range(12)])
    expect = np.sqrt(12 / 11 * np.sum(sums**2) / 60**2)
    assert abs(se - expect) < 1e-12


def test_residual_mean_report(small_dataset):
    nuis = fit_nuisances(small_dataset, ForestParams(num_trees=60, seed=3), num_trees=60)
    resid = residualize(small_dataset, nuis)
    rep = resid.mean_zero_report()
    assert set(rep) == {"y_res", "d_res", "z_res"}
    for entry in rep.values():
        assert np.isfinite(entry["mean"]) and np.isfinite(entry["bound"])
