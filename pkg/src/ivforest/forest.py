"""Honest subsampled tree ensemble producing locality weights.

Each tree draws whole clusters (subsampling without replacement), splits the
draw into a split half that chooses partitions and an estimation half that
populates leaves (honesty), and stores per-leaf moment means over the
estimation half. Trees are grown in little bags of `ci_group_size` trees that
share a cluster half-sample; the group structure drives the bootstrap-of-
little-bags variance estimate downstream.

All randomness derives from (seed, tree index) so ensembles are pure
functions of their inputs regardless of thread count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .exceptions import CapacityError, ConfigError, NoOobTreesError

MODES = ("regression", "causal", "instrumental")

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    """Ensemble geometry. Defaults follow the reference analysis settings:
    2000 trees, 200 pilot trees for tuning."""

    num_trees: int = 2000
    tuning_trees: int = 200
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_node_size: int = 5
    mtry: int | None = None
    seed: int = 0
    ci_group_size: int = 2
    variance_method: str = "little-bags"

    def __post_init__(self):
        if self.num_trees < 1 or self.tuning_trees < 1:
            raise ConfigError("num_trees and tuning_trees must be positive")
        if not 0.0 < self.subsample_fraction <= 0.5:
            raise ConfigError(
                "subsample_fraction must lie in (0, 0.5] so each tree fits "
                "inside its group's cluster half-sample"
            )
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ConfigError("honesty_fraction must lie in (0,1)")
        if self.min_node_size < 1:
            raise ConfigError("min_node_size must be positive")
        if self.ci_group_size < 1:
            raise ConfigError("ci_group_size must be positive")
        if self.variance_method not in ("little-bags", "half-sample"):
            raise ConfigError(f"unknown variance_method {self.variance_method!r}")

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is None:
            return min(p, int(np.ceil(np.sqrt(p))))
        if not 1 <= self.mtry <= p:
            raise ConfigError(f"mtry={self.mtry} outside 1..{p}")
        return self.mtry

    def to_dict(self) -> dict:
        return {
            "num_trees": self.num_trees,
            "tuning_trees": self.tuning_trees,
            "subsample_fraction": self.subsample_fraction,
            "honesty_fraction": self.honesty_fraction,
            "min_node_size": self.min_node_size,
            "mtry": self.mtry,
            "seed": self.seed,
            "ci_group_size": self.ci_group_size,
            "variance_method": self.variance_method,
        }


@dataclass
class Forest:
    """Packed honest ensemble (see module docstring for the array layout)."""

    mode: str
    params: ForestParams
    n_obs: int
    n_clusters: int
    cluster_of: np.ndarray          # dense cluster index per training row
    node_feature: np.ndarray
    node_threshold: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    tree_offset: np.ndarray         # (T+1,) node offsets
    agg_a: np.ndarray               # per-node moment mean A (leaves only)
    agg_b: np.ndarray               # per-node moment mean B
    leaf_est_start: np.ndarray      # per-node slice into est_members
    leaf_est_count: np.ndarray
    est_members: np.ndarray         # global row ids grouped by (tree, leaf)
    drawn: np.ndarray               # (T, C) bool, clusters in each subsample
    split_drawn: np.ndarray         # (T, C) bool, the split-half clusters
    metadata: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return self.tree_offset.shape[0] - 1

    def subsample_indices(self, t: int) -> np.ndarray:
        """Training rows whose cluster was drawn for tree t."""
        return np.nonzero(self.drawn[t][self.cluster_of])[0]

    # -- queries ---------------------------------------------------------

    def _query_clusters(self, exclude_oob: bool, nq: int) -> np.ndarray:
        if exclude_oob:
            return self.cluster_of
        return np.full(nq, -1, dtype=np.int64)

    def predict_moments(self, Xq, oob: bool = False):
        """(acc_a, acc_b, n_adm) summed over admissible trees.

        With oob=True, Xq must be the training matrix; tree t contributes to
        row i only when i's cluster was outside t's subsample.
        """
        Xq = np.ascontiguousarray(Xq, dtype=np.float64)
        if oob and Xq.shape[0] != self.n_obs:
            raise ConfigError("oob prediction requires the training matrix")
        qc = self._query_clusters(oob, Xq.shape[0])
        return kernels.predict_pass1(
            self.node_feature, self.node_threshold, self.node_left,
            self.node_right, self.tree_offset, self.agg_a, self.agg_b,
            self.drawn, qc, Xq,
        )

    def variance_moments(self, Xq, tau, bbar, oob: bool = False):
        Xq = np.ascontiguousarray(Xq, dtype=np.float64)
        qc = self._query_clusters(oob, Xq.shape[0])
        bbar_safe = np.where(np.abs(bbar) > 1e-300, bbar, 1.0)
        return kernels.predict_pass2(
            self.node_feature, self.node_threshold, self.node_left,
            self.node_right, self.tree_offset, self.agg_a, self.agg_b,
            self.drawn, qc, Xq,
            np.ascontiguousarray(tau, dtype=np.float64),
            np.ascontiguousarray(bbar_safe, dtype=np.float64), self.params.ci_group_size,
        )

    def weights_at(self, x, exclude_trees_containing: int | None = None) -> np.ndarray:
        """Locality weights alpha_i(x) over training rows.

        Average over admissible trees of 1{i in leaf(x)}/|leaf|, using each
        tree's estimation sample. With `exclude_trees_containing=j`, trees
        whose subsample included row j are skipped (out-of-bag rule).
        """
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
        w = np.zeros(self.n_obs)
        n_adm = 0
        excl_cluster = (
            self.cluster_of[exclude_trees_containing]
            if exclude_trees_containing is not None
            else -1
        )
        for t in range(self.n_trees):
            base = self.tree_offset[t]
            if self.tree_offset[t + 1] == base:
                continue
            if excl_cluster >= 0 and self.drawn[t, excl_cluster]:
                continue
            leaf = int(kernels.apply_tree(
                self.node_feature, self.node_threshold, self.node_left,
                self.node_right, base, x,
            )[0])
            cnt = int(self.leaf_est_count[base + leaf])
            if cnt == 0:
                continue
            start = int(self.leaf_est_start[base + leaf])
            members = self.est_members[start : start + cnt]
            w[members] += 1.0 / cnt
            n_adm += 1
        if n_adm == 0:
            raise NoOobTreesError(
                "no admissible tree for this query (every subsample hit the "
                "excluded observation or all trees are degenerate)"
            )
        return w / n_adm

    # -- serialization ---------------------------------------------------

    def save(self, path) -> None:
        header = {
            "format_version": FORMAT_VERSION,
            "mode": self.mode,
            "params": self.params.to_dict(),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "metadata": self.metadata,
        }
        with open(path, "wb") as fh:
            self._savez(fh, header)

    def _savez(self, fh, header) -> None:
        np.savez_compressed(
            fh,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            cluster_of=self.cluster_of,
            node_feature=self.node_feature,
            node_threshold=self.node_threshold,
            node_left=self.node_left,
            node_right=self.node_right,
            tree_offset=self.tree_offset,
            agg_a=self.agg_a,
            agg_b=self.agg_b,
            leaf_est_start=self.leaf_est_start,
            leaf_est_count=self.leaf_est_count,
            est_members=self.est_members,
            drawn=self.drawn,
            split_drawn=self.split_drawn,
        )

    @classmethod
    def load(cls, path) -> "Forest":
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(bytes(npz["header"].tobytes()).decode())
            if header.get("format_version") != FORMAT_VERSION:
                raise ConfigError(
                    f"forest artifact version {header.get('format_version')} "
                    f"unsupported (expected {FORMAT_VERSION})"
                )
            return cls(
                mode=header["mode"],
                params=ForestParams(**header["params"]),
                n_obs=header["n_obs"],
                n_clusters=header["n_clusters"],
                cluster_of=npz["cluster_of"],
                node_feature=npz["node_feature"],
                node_threshold=npz["node_threshold"],
                node_left=npz["node_left"],
                node_right=npz["node_right"],
                tree_offset=npz["tree_offset"],
                agg_a=npz["agg_a"],
                agg_b=npz["agg_b"],
                leaf_est_start=npz["leaf_est_start"],
                leaf_est_count=npz["leaf_est_count"],
                est_members=npz["est_members"],
                drawn=npz["drawn"],
                split_drawn=npz["split_drawn"],
                metadata=header.get("metadata", {}),
            )


def _prune_empty_leaves(feature, threshold, left, right, est_leaf_counts):
    """Collapse subtrees that received no estimation samples.

    Returns compact (feature, threshold, left, right, leaf_map) where
    leaf_map sends old leaf node ids to new ids (-1 if removed), or None
    when the whole tree is empty.
    """
    n = feature.shape[0]
    keep = np.zeros(n, dtype=np.int64)  # surviving subtree root per node, -1 gone
    # iterative post-order
    order = []
    stack = [0]
    while stack:
        node = stack.pop()
        order.append(node)
        if feature[node] >= 0:
            stack.append(left[node])
            stack.append(right[node])
    for node in reversed(order):
        if feature[node] < 0:
            keep[node] = node if est_leaf_counts[node] > 0 else -1
        else:
            kl = keep[left[node]]
            kr = keep[right[node]]
            if kl >= 0 and kr >= 0:
                keep[node] = node
            elif kl >= 0:
                keep[node] = kl
            elif kr >= 0:
                keep[node] = kr
            else:
                keep[node] = -1
    root = keep[0]
    if root < 0:
        return None
    # rebuild compactly; pushed nodes always satisfy keep[node] == node
    new_feature, new_threshold, new_left, new_right = [], [], [], []
    leaf_map = np.full(n, -1, dtype=np.int64)
    stack = [(int(root), -1, False)]
    while stack:
        node, parent, is_right = stack.pop()
        nid = len(new_feature)
        if parent >= 0:
            if is_right:
                new_right[parent] = nid
            else:
                new_left[parent] = nid
        if feature[node] >= 0:
            new_feature.append(feature[node])
            new_threshold.append(threshold[node])
            new_left.append(-1)
            new_right.append(-1)
            stack.append((int(keep[right[node]]), nid, True))
            stack.append((int(keep[left[node]]), nid, False))
        else:
            new_feature.append(-1)
            new_threshold.append(0.0)
            new_left.append(-1)
            new_right.append(-1)
            leaf_map[node] = nid
    return (
        np.asarray(new_feature, dtype=np.int32),
        np.asarray(new_threshold, dtype=np.float64),
        np.asarray(new_left, dtype=np.int32),
        np.asarray(new_right, dtype=np.int32),
        leaf_map,
    )


def _grow_one_tree(
    t, X, ry, rd, rz, is_regression, cluster_of, cluster_ids_by_group,
    tree_seeds, params, mtry, prod_a, prod_b,
):
    """Grow tree t end to end; returns its packed pieces."""
    ss = tree_seeds[t]
    rng = np.random.default_rng(ss)
    half = cluster_ids_by_group[t // params.ci_group_size]
    n_clusters_total = cluster_of.max() + 1
    k = int(np.ceil(params.subsample_fraction * n_clusters_total))
    perm = rng.permutation(half)
    sub_clusters = perm[:k]
    if sub_clusters.size < 2:
        raise CapacityError("need at least 2 clusters per subsample for honesty")
    n_split_cl = int(round(params.honesty_fraction * sub_clusters.size))
    n_split_cl = max(1, min(sub_clusters.size - 1, n_split_cl))
    split_clusters = sub_clusters[:n_split_cl]
    est_clusters = sub_clusters[n_split_cl:]

    drawn_mask = np.zeros(n_clusters_total, dtype=bool)
    drawn_mask[sub_clusters] = True
    split_mask = np.zeros(n_clusters_total, dtype=bool)
    split_mask[split_clusters] = True
    split_rows = np.nonzero(split_mask[cluster_of])[0]
    est_member_mask = np.zeros(n_clusters_total, dtype=bool)
    est_member_mask[est_clusters] = True
    est_rows = np.nonzero(est_member_mask[cluster_of])[0]

    kernel_state = int(ss.generate_state(2, np.uint64)[1])
    Xs = np.ascontiguousarray(X[split_rows])
    feature, threshold, left, right = kernels.grow_tree(
        Xs,
        np.ascontiguousarray(ry[split_rows]),
        np.ascontiguousarray(rd[split_rows]) if rd is not None else np.zeros(0),
        np.ascontiguousarray(rz[split_rows]) if rz is not None else np.zeros(0),
        is_regression, params.min_node_size, mtry, kernel_state,
    )

    # honest repopulation with the estimation half
    if est_rows.size == 0:
        return t, None, drawn_mask, split_mask
    est_leaf = kernels.apply_tree(
        feature, threshold, left, right, 0,
        np.ascontiguousarray(X[est_rows]),
    )
    counts = np.bincount(est_leaf, minlength=feature.shape[0])
    pruned = _prune_empty_leaves(feature, threshold, left, right, counts)
    if pruned is None:
        return t, None, drawn_mask, split_mask
    feature, threshold, left, right, leaf_map = pruned

    new_leaf = leaf_map[est_leaf]
    order = np.argsort(new_leaf, kind="stable")
    members = est_rows[order]
    leaves_sorted = new_leaf[order]
    n_nodes = feature.shape[0]
    starts = np.searchsorted(leaves_sorted, np.arange(n_nodes), side="left")
    ends = np.searchsorted(leaves_sorted, np.arange(n_nodes), side="right")
    leaf_count = (ends - starts).astype(np.int64)
    leaf_start = starts.astype(np.int64)

    agg_a = np.zeros(n_nodes)
    agg_b = np.zeros(n_nodes)
    occupied = np.nonzero(leaf_count > 0)[0]
    if occupied.size:
        sums_a = np.add.reduceat(prod_a[members], leaf_start[occupied])
        sums_b = np.add.reduceat(prod_b[members], leaf_start[occupied])
        agg_a[occupied] = sums_a / leaf_count[occupied]
        agg_b[occupied] = sums_b / leaf_count[occupied]

    pack = (feature, threshold, left, right, agg_a, agg_b, leaf_start, leaf_count, members)
    return t, pack, drawn_mask, split_mask


def grow_forest(
    X,
    residual_y,
    residual_d,
    residual_z,
    cluster_of,
    mode: str,
    params: ForestParams,
    n_threads: int = 1,
    num_trees: int | None = None,
) -> Forest:
    """Grow an honest ensemble on (optionally residualized) inputs.

    mode "regression": residual_y is the raw response; residual_d/z unused.
    mode "causal": residual_z is ignored; the instrument is the treatment.
    mode "instrumental": all three residual vectors are used.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown forest mode {mode!r}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, p = X.shape
    cluster_of = np.asarray(cluster_of, dtype=np.int64)
    n_clusters = int(cluster_of.max()) + 1 if n else 0
    if n < 2 * params.min_node_size:
        raise CapacityError(
            f"N={n} < 2*min_node_size={2 * params.min_node_size}; cannot grow"
        )
    if n_clusters < 4:
        raise CapacityError("need at least 4 clusters for subsampled honest trees")
    mtry = params.resolve_mtry(p)
    T = num_trees if num_trees is not None else params.num_trees

    is_regression = mode == "regression"
    ry = np.asarray(residual_y, dtype=np.float64)
    if is_regression:
        rd = rz = None
        prod_a = ry
        prod_b = np.ones(n)
    else:
        rd = np.asarray(residual_d, dtype=np.float64)
        rz = rd if mode == "causal" else np.asarray(residual_z, dtype=np.float64)
        prod_a = rz * ry
        prod_b = rz * rd

    n_groups = int(np.ceil(T / params.ci_group_size))
    master = np.random.SeedSequence(entropy=params.seed)
    children = master.spawn(n_groups + T)
    group_seeds = children[:n_groups]
    tree_seeds = children[n_groups:]

    half_size = int(np.ceil(n_clusters / 2))
    cluster_ids_by_group = []
    for g in range(n_groups):
        g_rng = np.random.default_rng(group_seeds[g])
        cluster_ids_by_group.append(g_rng.permutation(n_clusters)[:half_size])

    packs: list = [None] * T
    drawn = np.zeros((T, n_clusters), dtype=bool)
    split_drawn = np.zeros((T, n_clusters), dtype=bool)

    def run(t):
        return _grow_one_tree(
            t, X, ry, rd, rz, is_regression, cluster_of,
            cluster_ids_by_group, tree_seeds, params, mtry, prod_a, prod_b,
        )

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run, range(T)))
    else:
        results = [run(t) for t in range(T)]
    for t, pack, drawn_mask, split_mask in results:
        packs[t] = pack
        drawn[t] = drawn_mask
        split_drawn[t] = split_mask

    node_counts = [0 if p_ is None else p_[0].shape[0] for p_ in packs]
    tree_offset = np.zeros(T + 1, dtype=np.int64)
    np.cumsum(node_counts, out=tree_offset[1:])
    total_nodes = int(tree_offset[-1])

    node_feature = np.empty(total_nodes, dtype=np.int32)
    node_threshold = np.empty(total_nodes, dtype=np.float64)
    node_left = np.empty(total_nodes, dtype=np.int32)
    node_right = np.empty(total_nodes, dtype=np.int32)
    agg_a = np.zeros(total_nodes)
    agg_b = np.zeros(total_nodes)
    leaf_est_start = np.zeros(total_nodes, dtype=np.int64)
    leaf_est_count = np.zeros(total_nodes, dtype=np.int64)
    member_chunks = []
    member_pos = 0
    for t in range(T):
        pack = packs[t]
        if pack is None:
            continue
        base = tree_offset[t]
        f, thr, le, ri, a, b, lstart, lcount, members = pack
        sl = slice(base, base + f.shape[0])
        node_feature[sl] = f
        node_threshold[sl] = thr
        node_left[sl] = le
        node_right[sl] = ri
        agg_a[sl] = a
        agg_b[sl] = b
        leaf_est_start[sl] = lstart + member_pos
        leaf_est_count[sl] = lcount
        member_chunks.append(members)
        member_pos += members.shape[0]
    est_members = (
        np.concatenate(member_chunks) if member_chunks else np.zeros(0, dtype=np.int64)
    )

    eff_params = params if num_trees is None else replace(params, num_trees=T)
    return Forest(
        mode=mode,
        params=eff_params,
        n_obs=n,
        n_clusters=n_clusters,
        cluster_of=cluster_of,
        node_feature=node_feature,
        node_threshold=node_threshold,
        node_left=node_left,
        node_right=node_right,
        tree_offset=tree_offset,
        agg_a=agg_a,
        agg_b=agg_b,
        leaf_est_start=leaf_est_start,
        leaf_est_count=leaf_est_count,
        est_members=est_members,
        drawn=drawn,
        split_drawn=split_drawn,
        metadata={"backend": kernels.BACKEND, "mtry_resolved": mtry},
    )


def oob_regression_predict(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-bag conditional-mean predictions: (prediction, n_admissible)."""
    acc_a, acc_b, n_adm = forest.predict_moments(X, oob=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pred = np.where(n_adm > 0, acc_a / np.maximum(acc_b, 1e-300), np.nan)
    return pred, n_adm


def tune_forest_params(
    X, residual_y, residual_d, residual_z, cluster_of, mode,
    base_params: ForestParams, n_candidates: int = 10,
    tuned: tuple[str, ...] = ("min_node_size", "mtry", "subsample_fraction"),
) -> ForestParams:
    """Random-search tuning scored with tuning_trees-tree pilot forests.

    Scores: regression, OOB MSE; causal/instrumental, mean squared
    instrument-moment residual (z~ * (y~ - d~ tau_oob))^2.
    """
    p = X.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[base_params.seed, 0x7E57]))
    best_score = np.inf
    best = base_params
    ry = np.asarray(residual_y, dtype=np.float64)
    for c in range(n_candidates):
        cand = base_params
        if "min_node_size" in tuned:
            cand = replace(cand, min_node_size=int(rng.integers(5, 51)))
        if "mtry" in tuned:
            cand = replace(cand, mtry=int(rng.integers(1, p + 1)))
        if "subsample_fraction" in tuned:
            cand = replace(cand, subsample_fraction=float(rng.uniform(0.2, 0.5)))
        cand = replace(cand, seed=base_params.seed + 7919 * (c + 1))
        forest = grow_forest(
            X, ry, residual_d, residual_z, cluster_of, mode, cand,
            num_trees=cand.tuning_trees,
        )
        acc_a, acc_b, n_adm = forest.predict_moments(X, oob=True)
        ok = n_adm > 0
        if mode == "regression":
            pred = acc_a[ok] / np.maximum(acc_b[ok], 1e-300)
            score = float(np.mean((ry[ok] - pred) ** 2))
        else:
            rd = np.asarray(residual_d, dtype=np.float64)
            rz = rd if mode == "causal" else np.asarray(residual_z, dtype=np.float64)
            safe_b = np.where(np.abs(acc_b[ok]) > 1e-300, acc_b[ok], 1.0)
            tau = acc_a[ok] / safe_b
            score = float(np.mean((rz[ok] * (ry[ok] - rd[ok] * tau)) ** 2))
        if score < best_score:
            best_score = score
            best = replace(cand, seed=base_params.seed)
    return best
