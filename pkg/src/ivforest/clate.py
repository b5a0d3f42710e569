"""Local 2SLS on forest weights, doubly robust scores, and LATE aggregation.

The target forest grows on Robinson residuals (Y - m, D - e, Z - g) and
solves the weighted Wald ratio at each query point. Out-of-bag evaluation at
the training points yields the CLATE vector; per-observation standard errors
come from the little-bags group structure, clustered because subsampling
draws whole clusters. Averaging the doubly robust scores gives the LATE with
a cluster-robust sandwich SE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CausalDataset
from .exceptions import ConfigError, WeakIdentificationError
from .forest import Forest, ForestParams, grow_forest
from .nuisance import DELTA_FLOOR, NuisanceSet

WEAK_DENOMINATOR_FLOOR = 1e-6


@dataclass(frozen=True)
class Residuals:
    """Robinson-partialled data: y_res = Y-m, d_res = D-e, z_res = Z-g."""

    y_res: np.ndarray
    d_res: np.ndarray
    z_res: np.ndarray

    def mean_zero_report(self) -> dict:
        """|mean| vs 3 sd/sqrt(N) per vector; reported, never enforced."""
        out = {}
        for name in ("y_res", "d_res", "z_res"):
            v = getattr(self, name)
            n = v.shape[0]
            bound = 3.0 * float(np.std(v)) / np.sqrt(n) if n else 0.0
            out[name] = {"mean": float(np.mean(v)), "bound": bound,
                         "within": bool(abs(np.mean(v)) <= bound)}
        return out


@dataclass
class ClateResult:
    """Per-observation CLATEs with cluster-aware SEs and weak-IV flags."""

    tau_hat: np.ndarray
    se: np.ndarray
    weak_flags: np.ndarray
    denominator: np.ndarray
    n_admissible: np.ndarray
    params: ForestParams
    mode: str
    forest: Forest | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class DrScores:
    """Doubly robust scores; late == mean(gamma) by construction."""

    gamma: np.ndarray
    late: float
    late_se: float
    n_floored_delta: int = 0
    diagnostics: dict = field(default_factory=dict)


def residualize(data: CausalDataset, nuis: NuisanceSet) -> Residuals:
    return Residuals(
        y_res=data.outcome - nuis.m_hat,
        d_res=data.treatment - nuis.e_hat,
        z_res=data.instrument - nuis.g_hat,
    )


def solve_local_2sls(weights, residuals: Residuals,
                     weak_floor: float = WEAK_DENOMINATOR_FLOOR) -> float:
    """Weighted Wald ratio sum(a z~ y~)/sum(a z~ d~).

    Exact solution of the weighted instrument-moment equation on
    residualized data. Raises WeakIdentificationError when the denominator
    magnitude falls below `weak_floor`.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != residuals.y_res.shape[0]:
        raise ConfigError("weights must align with the residual vectors")
    if (w < 0).any():
        raise ConfigError("weights must be nonnegative")
    num = float(np.sum(w * residuals.z_res * residuals.y_res))
    den = float(np.sum(w * residuals.z_res * residuals.d_res))
    if abs(den) < weak_floor:
        raise WeakIdentificationError(
            f"local 2SLS denominator {den:.3e} below floor {weak_floor:.0e}",
            denominator=den,
        )
    return num / den


def predict_clates(
    data: CausalDataset,
    nuis: NuisanceSet,
    params: ForestParams,
    mode: str = "instrumental",
    n_threads: int = 1,
    weak_floor: float = WEAK_DENOMINATOR_FLOOR,
) -> ClateResult:
    """Grow the target forest on residuals and evaluate CLATEs out-of-bag.

    mode "instrumental" uses Z - g as the instrument residual; mode "causal"
    substitutes the treatment residual for it (a causal forest; with Z == D
    and g == e the two paths coincide bit for bit at equal seeds).
    """
    if mode not in ("instrumental", "causal"):
        raise ConfigError(f"clate mode must be instrumental or causal, got {mode!r}")
    resid = residualize(data, nuis)
    _, cl = data.cluster_index()
    forest = grow_forest(
        data.features, resid.y_res, resid.d_res,
        resid.d_res if mode == "causal" else resid.z_res,
        cl, mode, params, n_threads=n_threads,
    )

    acc_a, acc_b, n_adm = forest.predict_moments(data.features, oob=True)
    has_trees = n_adm > 0
    safe_n = np.maximum(n_adm, 1)
    den_bar = acc_b / safe_n
    weak = (~has_trees) | (np.abs(den_bar) < weak_floor)
    safe_b = np.where(np.abs(acc_b) > 1e-300, acc_b, 1.0)
    tau = np.where(has_trees & (np.abs(acc_b) > 1e-300), acc_a / safe_b, 0.0)

    n_good, s1, s2, st2 = forest.variance_moments(
        data.features, tau, den_bar, oob=True
    )
    se = _little_bags_se(
        n_good, s1, s2, st2, params.ci_group_size, params.variance_method, tau
    )
    se = np.where(weak, np.nan, se)

    return ClateResult(
        tau_hat=tau,
        se=se,
        weak_flags=weak,
        denominator=den_bar,
        n_admissible=n_adm,
        params=params,
        mode=mode,
        forest=forest,
        diagnostics={
            "residual_means": resid.mean_zero_report(),
            "n_weak": int(weak.sum()),
            "weak_floor": weak_floor,
        },
    )


def _little_bags_se(n_good, s1, s2, st2, group_size, method, tau):
    with np.errstate(invalid="ignore", divide="ignore"):
        G = np.maximum(n_good, 1)
        m = s1 / G
        v_between = s2 / G - m * m
        if method == "little-bags" and group_size >= 2:
            v_total = st2 / (G * group_size) - m * m
            within_noise = (v_total - v_between) / (group_size - 1)
            var = v_between - within_noise
            var = np.where(var > 0, var, v_between)
        else:
            var = v_between
        var = np.where(n_good >= 2, var, np.nan)
        se = np.sqrt(np.maximum(var, 0.0))
    floor = 1e-12 * (1.0 + np.abs(tau))
    return np.where(np.isnan(se), np.nan, np.maximum(se, floor))


def cluster_se_of_mean(values, cluster_idx) -> float:
    """Cluster-robust SE of the sample mean (cluster-summed residuals)."""
    v = np.asarray(values, dtype=np.float64)
    resid = v - v.mean()
    sums = np.bincount(np.asarray(cluster_idx, dtype=np.int64), weights=resid)
    G = sums.shape[0]
    if G < 2:
        return float("nan")
    var = G / (G - 1) * float(np.sum(sums * sums)) / v.shape[0] ** 2
    return float(np.sqrt(var))


def doubly_robust_scores(
    data: CausalDataset,
    nuis: NuisanceSet,
    clates: ClateResult,
    delta_floor: float = DELTA_FLOOR,
) -> DrScores:
    """Per-observation doubly robust scores and their cluster-robust mean.

    gamma_i = tau(X_i)
            + [(Z_i - g_i) / (g_i (1 - g_i))] / delta_i
              * (Y_i - m_i - (D_i - e_i) tau(X_i))

    The causal mode replaces Z with D, g with e, and delta with 1 (the plain
    AIPW score for an unconfounded treatment).
    """
    tau = clates.tau_hat
    m, e, g = nuis.m_hat, nuis.e_hat, nuis.g_hat
    if clates.mode == "causal":
        inst, prop = data.treatment, e
        delta = np.ones_like(tau)
        n_floored = 0
    else:
        inst, prop = data.instrument, g
        delta = nuis.delta_floored(delta_floor)
        n_floored = int(nuis.delta_flags(delta_floor).sum())
    resid = data.outcome - m - (data.treatment - e) * tau
    gamma = tau + (inst - prop) / (prop * (1.0 - prop)) / delta * resid
    late = float(np.mean(gamma))
    _, cl = data.cluster_index()
    late_se = cluster_se_of_mean(gamma, cl)
    return DrScores(
        gamma=gamma,
        late=late,
        late_se=late_se,
        n_floored_delta=n_floored,
        diagnostics={"delta_floor": delta_floor, "mode": clates.mode},
    )
