"""Cross-fitted nuisance estimates, all delivered out-of-bag.

m(x) = E[Y|X] and g(x) = P[Z=1|X] use the full covariate vector; the
treatment propensity e(x) = P[D=1|X] uses only features flagged
in_propensity (the supply-side exclusion rule). The compliance score
delta(x) = E[D|X,Z=1] - E[D|X,Z=0] comes from an auxiliary causal forest of
D on Z. Out-of-bag prediction is the cross-fitting device: observation i's
own trees never touch its nuisance value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CausalDataset
from .exceptions import ConfigError
from .forest import ForestParams, grow_forest, oob_regression_predict

PROPENSITY_CLAMP = (0.01, 0.99)
DELTA_FLOOR = 0.05

_SEED_TAGS = {"m": 11, "e": 13, "g": 17, "m_d": 19, "delta": 23}


def derived_seed(seed: int, tag: str) -> int:
    ss = np.random.SeedSequence(entropy=[seed, _SEED_TAGS[tag]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class NuisanceSet:
    """Out-of-bag nuisance vectors plus clamping/floor diagnostics."""

    m_hat: np.ndarray
    e_hat: np.ndarray
    g_hat: np.ndarray
    delta_hat: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def delta_floored(self, floor: float = DELTA_FLOOR) -> np.ndarray:
        """Compliance scores with magnitudes floored away from zero."""
        d = self.delta_hat
        return np.where(np.abs(d) < floor, np.where(d < 0, -floor, floor), d)

    def delta_flags(self, floor: float = DELTA_FLOOR) -> np.ndarray:
        return np.abs(self.delta_hat) < floor

    def to_csv(self, path) -> None:
        flags = self.delta_flags()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["m_hat", "e_hat", "g_hat", "delta_hat", "flags"])
            for i in range(self.m_hat.shape[0]):
                w.writerow([
                    repr(float(self.m_hat[i])),
                    repr(float(self.e_hat[i])),
                    repr(float(self.g_hat[i])),
                    repr(float(self.delta_hat[i])),
                    "weak_compliance" if flags[i] else "",
                ])


def _oob_fill(pred, n_adm, fallback):
    """Replace never-out-of-bag rows by the unconditional mean (counted)."""
    missing = n_adm == 0
    if missing.any():
        pred = np.where(missing, fallback, pred)
    return pred, int(missing.sum())


def _clamp(p, lo, hi):
    clamped = int(np.sum((p < lo) | (p > hi)))
    return np.clip(p, lo, hi), clamped


def fit_nuisances(
    data: CausalDataset,
    params: ForestParams,
    clamp: tuple[float, float] = PROPENSITY_CLAMP,
    num_trees: int | None = None,
    n_threads: int = 1,
) -> NuisanceSet:
    """Fit m, e, g via regression forests and delta via a causal forest."""
    X = data.features
    prop_cols = data.propensity_columns()
    if prop_cols.size == 0:
        raise ConfigError("no features flagged in_propensity; e(x) is unidentified")
    Xe = np.ascontiguousarray(X[:, prop_cols])
    _, cl = data.cluster_index()

    y, d, z = data.outcome, data.treatment, data.instrument

    def regression(target, Xmat, tag):
        f = grow_forest(
            Xmat, target, None, None, cl, "regression",
            replace(params, seed=derived_seed(params.seed, tag)),
            n_threads=n_threads, num_trees=num_trees,
        )
        pred, n_adm = oob_regression_predict(f, Xmat)
        return _oob_fill(pred, n_adm, float(np.mean(target)))

    m_hat, miss_m = regression(y, X, "m")
    e_raw, miss_e = regression(d, Xe, "e")
    g_raw, miss_g = regression(z, X, "g")
    m_d, miss_md = regression(d, X, "m_d")

    lo, hi = clamp
    e_hat, e_clamped = _clamp(e_raw, lo, hi)
    g_hat, g_clamped = _clamp(g_raw, lo, hi)

    # auxiliary causal forest: outcome D, treatment Z, residualized
    delta_forest = grow_forest(
        X, d - m_d, z - g_hat, None, cl, "causal",
        replace(params, seed=derived_seed(params.seed, "delta")),
        n_threads=n_threads, num_trees=num_trees,
    )
    acc_a, acc_b, n_adm = delta_forest.predict_moments(X, oob=True)
    safe_b = np.where(np.abs(acc_b) > 1e-300, acc_b, 1.0)
    delta_hat = acc_a / safe_b
    delta_hat, miss_delta = _oob_fill(
        delta_hat, n_adm,
        float(np.mean(d[z == 1])) - float(np.mean(d[z == 0])),
    )

    diags = {
        "e_clamped": e_clamped,
        "g_clamped": g_clamped,
        "clamp_bounds": [lo, hi],
        "delta_floor": DELTA_FLOOR,
        "n_weak_compliance": int(np.sum(np.abs(delta_hat) < DELTA_FLOOR)),
        "no_oob": {"m": miss_m, "e": miss_e, "g": miss_g, "m_d": miss_md, "delta": miss_delta},
        "propensity_features": [data.feature_specs[j].name for j in prop_cols],
    }
    return NuisanceSet(m_hat=m_hat, e_hat=e_hat, g_hat=g_hat, delta_hat=delta_hat,
                       diagnostics=diags)
