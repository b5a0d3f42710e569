"""Heterogeneity inference on the doubly robust scores.

Three layers: OLS of the scores on covariates (best linear predictors),
most-vs-least affected quartile comparisons (classification analysis), and
the CLATE histogram payload for the figures component.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import CausalDataset
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

Z975 = float(stats.norm.ppf(0.975))


@dataclass
class BlpResult:
    names: list[str]
    coefficients: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_obs: int

    def to_dict(self) -> dict:
        return {
            "coefficients": [
                {
                    "name": self.names[j],
                    "estimate": float(self.coefficients[j]),
                    "se": float(self.se[j]),
                    "ci_low": float(self.ci_low[j]),
                    "ci_high": float(self.ci_high[j]),
                }
                for j in range(len(self.names))
            ],
            "n_obs": self.n_obs,
        }


@dataclass
class ClanResult:
    names: list[str]
    mean_most: np.ndarray
    mean_least: np.ndarray
    diff: np.ndarray
    diff_se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    group_size: int
    boundary_ties: bool

    def to_dict(self) -> dict:
        return {
            "modifiers": [
                {
                    "name": self.names[j],
                    "mean_most": float(self.mean_most[j]),
                    "mean_least": float(self.mean_least[j]),
                    "diff": float(self.diff[j]),
                    "diff_se": float(self.diff_se[j]),
                    "ci_low": float(self.ci_low[j]),
                    "ci_high": float(self.ci_high[j]),
                }
                for j in range(len(self.names))
            ],
            "group_size": self.group_size,
            "boundary_ties": self.boundary_ties,
        }


def build_design(data: CausalDataset) -> tuple[np.ndarray, list[str]]:
    """Expand features into the regression design (no intercept column).

    Binary and continuous features pass through; tercile-coded features
    become q1/q2 indicator pairs with q3 the reference category.
    """
    cols = []
    names = []
    for j, spec in enumerate(data.feature_specs):
        col = data.features[:, j]
        if spec.kind == "tercile-coded":
            cols.append((col == 1.0).astype(float))
            names.append(f"{spec.name}:q1")
            cols.append((col == 2.0).astype(float))
            names.append(f"{spec.name}:q2")
        else:
            cols.append(col.astype(float))
            names.append(spec.name)
    return np.column_stack(cols), names


def _cluster_sandwich(X, resid, cluster_idx):
    """CR1 covariance of OLS coefficients."""
    n, k = X.shape
    xtx_inv = np.linalg.inv(X.T @ X)
    cl = np.asarray(cluster_idx, dtype=np.int64)
    G = int(cl.max()) + 1
    meat = np.zeros((k, k))
    Xu = X * resid[:, None]
    for g in range(G):
        sg = Xu[cl == g].sum(axis=0)
        meat += np.outer(sg, sg)
    if G > 1 and n > k:
        meat *= G / (G - 1) * (n - 1) / (n - k)
    return xtx_inv @ meat @ xtx_inv


def blp(gamma, X, names, cluster_idx=None) -> BlpResult:
    """OLS of the doubly robust scores on [1, X] with cluster-robust SEs."""
    gamma = np.asarray(gamma, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != gamma.shape[0]:
        raise ConfigError("design matrix must be N x p aligned with the scores")
    n = gamma.shape[0]
    D = np.column_stack([np.ones(n), X])
    all_names = ["(intercept)"] + list(names)

    rank = np.linalg.matrix_rank(D)
    if rank < D.shape[1]:
        # identify offending columns via QR column norms
        q, r = np.linalg.qr(D)
        diag = np.abs(np.diag(r))
        bad = [all_names[j] for j in range(D.shape[1]) if diag[j] < 1e-8 * diag.max()]
        raise ConfigError(f"design matrix is rank deficient; collinear columns: {bad}")

    beta, *_ = np.linalg.lstsq(D, gamma, rcond=None)
    resid = gamma - D @ beta
    if cluster_idx is None:
        cluster_idx = np.arange(n)
    cov = _cluster_sandwich(D, resid, cluster_idx)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return BlpResult(
        names=all_names,
        coefficients=beta,
        se=se,
        ci_low=beta - Z975 * se,
        ci_high=beta + Z975 * se,
        n_obs=n,
    )


def clan(gamma, modifiers, names) -> ClanResult:
    """Most- vs least-affected quartile means per effect modifier.

    Observations ranked by score; top quartile (size N//4) = most affected,
    bottom quartile = least. Difference tested with a Welch-style SE.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    M = np.asarray(modifiers, dtype=np.float64)
    n = gamma.shape[0]
    if n < 8:
        raise ConfigError("classification analysis needs N >= 8 for nonempty quartiles")
    if M.ndim != 2 or M.shape[0] != n:
        raise ConfigError("modifier matrix must be N x m aligned with the scores")
    k = n // 4
    order = np.argsort(gamma, kind="stable")
    least = order[:k]
    most = order[-k:]
    srt = gamma[order]
    boundary_ties = bool(srt[k - 1] == srt[k] or srt[n - k] == srt[n - k - 1])
    if boundary_ties:
        logger.info("quartile boundary ties broken by observation index")

    mm = M[most].mean(axis=0)
    ml = M[least].mean(axis=0)
    diff = mm - ml
    v1 = M[most].var(axis=0, ddof=1)
    v0 = M[least].var(axis=0, ddof=1)
    se = np.sqrt(v1 / k + v0 / k)
    with np.errstate(invalid="ignore", divide="ignore"):
        df = (v1 / k + v0 / k) ** 2 / (
            (v1 / k) ** 2 / (k - 1) + (v0 / k) ** 2 / (k - 1)
        )
    tcrit = np.where(se > 0, stats.t.ppf(0.975, np.where(df > 0, df, 1.0)), 0.0)
    half = np.where(se > 0, tcrit * se, 0.0)
    return ClanResult(
        names=list(names),
        mean_most=mm,
        mean_least=ml,
        diff=diff,
        diff_se=se,
        ci_low=diff - half,
        ci_high=diff + half,
        group_size=k,
        boundary_ties=boundary_ties,
    )


def clate_histogram(tau_hat, bins: int, late: float, late_ci: tuple[float, float]) -> dict:
    """Equal-width histogram payload with LATE/CI markers and a zero line."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    tau = np.asarray(tau_hat, dtype=np.float64)
    lo = float(np.min(tau))
    hi = float(np.max(tau))
    if lo == hi:
        # degenerate range: one unit-width bin centered on the point mass
        edges = np.linspace(lo - 0.5, hi + 0.5, bins + 1)
    else:
        edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(tau, bins=edges)
    return {
        "edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "late": float(late),
        "late_ci": [float(late_ci[0]), float(late_ci[1])],
        "zero_line": 0.0,
        "n_obs": int(tau.shape[0]),
    }
