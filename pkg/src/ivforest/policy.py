"""Exhaustive depth-two policy tree search on doubly robust scores.

Candidate thresholds are midpoints between consecutive distinct observed
feature values; leaf actions follow the sign of the leaf's score sum, so a
tree's value is the mean of sign-aligned scores. The search is exact: every
(root split, child split/leaf) combination on the grid is scored, with ties
resolved toward the lexicographically first candidate (single leaf before
splits, then feature index, then threshold).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .exceptions import ConfigError


@dataclass(frozen=True)
class PolicySplit:
    feature: int
    threshold: float


@dataclass
class PolicyTree:
    """Depth-<=2 axis-aligned assignment rule; None splits mark leaves."""

    root: PolicySplit | None
    left: PolicySplit | None
    right: PolicySplit | None
    actions: tuple[int, ...]          # leaf actions in routing order
    value_estimate: float
    feature_names: list[str]

    def assign(self, X) -> np.ndarray:
        """Treatment assignment in {0,1} for each row of X."""
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            out[i] = self._assign_row(X[i])
        return out

    def _assign_row(self, x) -> int:
        if self.root is None:
            return self.actions[0]
        if x[self.root.feature] <= self.root.threshold:
            side, base = self.left, 0
        else:
            side, base = self.right, 2
        if side is None:
            return self.actions[base]
        return self.actions[base + (0 if x[side.feature] <= side.threshold else 1)]

    def to_dict(self) -> dict:
        def node(split, leaves):
            if split is None:
                return {"leaf": True, "action": "treat" if leaves[0] else "control"}
            return {
                "leaf": False,
                "feature": self.feature_names[split.feature],
                "feature_index": split.feature,
                "threshold": split.threshold,
                "left": {"leaf": True, "action": "treat" if leaves[0] else "control"},
                "right": {"leaf": True, "action": "treat" if leaves[1] else "control"},
            }

        if self.root is None:
            tree = {"leaf": True, "action": "treat" if self.actions[0] else "control"}
        else:
            tree = {
                "leaf": False,
                "feature": self.feature_names[self.root.feature],
                "feature_index": self.root.feature,
                "threshold": self.root.threshold,
                "left": node(self.left, self.actions[0:2]),
                "right": node(self.right, self.actions[2:4]),
            }
        return {"tree": tree, "value_estimate": self.value_estimate}

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def policy_value(assignment, gamma) -> float:
    """Doubly robust value (1/N) sum (2 pi_i - 1) gamma_i."""
    pi = np.asarray(assignment, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)
    if pi.shape != g.shape:
        raise ConfigError("assignment and scores must share length")
    return float(np.mean((2.0 * pi - 1.0) * g))


def candidate_thresholds(values) -> np.ndarray:
    """Midpoints between consecutive distinct observed values (canonical)."""
    u = np.unique(np.asarray(values, dtype=np.float64))
    if u.size < 2:
        return np.zeros(0)
    return (u[:-1] + u[1:]) / 2.0


def learn_depth2(
    X,
    gamma,
    feature_names=None,
    treatment_cost: float = 0.0,
) -> PolicyTree:
    """Exact argmax over depth-<=2 trees of the Eq-style value.

    `treatment_cost` is subtracted from every score before the search
    (constant per-treatment cost; zero by default).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64) - treatment_cost
    n, p = X.shape
    if n < 1 or p < 1:
        raise ConfigError("need at least one observation and one feature")
    if feature_names is None:
        feature_names = [f"x{j+1}" for j in range(p)]

    thr_list = [candidate_thresholds(X[:, f]) for f in range(p)]
    thr_offset = np.zeros(p + 1, dtype=np.int64)
    np.cumsum([t.size for t in thr_list], out=thr_offset[1:])
    thr_flat = (
        np.concatenate(thr_list) if thr_offset[-1] > 0 else np.zeros(0)
    )

    rf, rthr, lf, lthr, rrf, rrthr = kernels.policy_search_depth2(
        X, g, thr_flat, thr_offset
    )

    root = None if rf < 0 else PolicySplit(int(rf), float(rthr))
    left = None if lf < 0 else PolicySplit(int(lf), float(lthr))
    right = None if rrf < 0 else PolicySplit(int(rrf), float(rrthr))

    actions = _leaf_actions(X, g, root, left, right)
    tree = PolicyTree(
        root=root, left=left, right=right, actions=actions,
        value_estimate=0.0, feature_names=list(feature_names),
    )
    tree.value_estimate = policy_value(tree.assign(X), g)
    return tree


def _leaf_actions(X, g, root, left, right) -> tuple[int, ...]:
    """Sign rule: treat a leaf iff its score sum is positive."""
    n = X.shape[0]
    if root is None:
        return (int(float(np.sum(g)) > 0.0),) * 4
    mask_l = X[:, root.feature] <= root.threshold
    actions = []
    for side_mask, split in ((mask_l, left), (~mask_l, right)):
        if split is None:
            s = float(np.sum(g[side_mask]))
            a = int(s > 0.0)
            actions += [a, a]
        else:
            sub = X[side_mask, split.feature] <= split.threshold
            s1 = float(np.sum(g[side_mask][sub]))
            s2 = float(np.sum(g[side_mask][~sub]))
            actions += [int(s1 > 0.0), int(s2 > 0.0)]
    return tuple(actions)
