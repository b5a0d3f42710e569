"""Vectorized numpy implementations of the hot kernels.

This is the fallback path (IVFOREST_NO_NUMBA=1); `_kernels_nb` carries the
numba-compiled twins. Both implement the same algorithms with identical node
numbering, candidate enumeration order, and tie-breaking so that the two
backends are interchangeable up to floating-point summation order.

Tree array format (one tree):
    feature[j]   int32, split feature of node j, -1 for a leaf
    threshold[j] float64, route x[feature] <= threshold to the left child
    left[j], right[j] int32 child node ids, -1 for a leaf

A forest packs trees by concatenation with `tree_offset` (length T+1);
child ids stay tree-local. `agg_a`/`agg_b` hold per-leaf moment means over the
honest estimation sample (regression: mean response and 1.0; instrumental:
mean z~*y~ and mean z~*d~).
"""

from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


def splitmix64(state):
    """Advance a splitmix64 state; returns (new_state, draw)."""
    state = (state + 0x9E3779B97F4A7C15) & _U64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    z = z ^ (z >> 31)
    return state, z


def _draw_features(p, mtry, state, buf):
    """Partial Fisher-Yates: first `mtry` entries of buf get the draw."""
    for k in range(p):
        buf[k] = k
    for k in range(mtry):
        state, z = splitmix64(state)
        j = k + int(z % (p - k))
        buf[k], buf[j] = buf[j], buf[k]
    return state


def grow_tree(Xs, ry, rd, rz, is_regression, min_node_size, mtry, rng_state):
    """Grow one honest tree's structure on the split half.

    Returns (feature, threshold, left, right) trimmed to the node count.
    Split criterion: node-level moment solve -> influence pseudo-outcomes
    rho, maximize sum_children (sum rho)^2 / |child| over candidate
    (feature, midpoint-threshold) pairs; mtry features drawn per node.
    """
    n, p = Xs.shape
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, dtype=np.int32)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    node_lo = np.zeros(max_nodes, dtype=np.int64)
    node_hi = np.zeros(max_nodes, dtype=np.int64)

    idx = np.arange(n, dtype=np.int64)
    stack = [0]
    node_lo[0] = 0
    node_hi[0] = n
    n_nodes = 1
    state = int(rng_state)
    feat_buf = np.empty(p, dtype=np.int64)

    while stack:
        node = stack.pop()
        lo = node_lo[node]
        hi = node_hi[node]
        size = hi - lo
        if size < 2 * min_node_size:
            continue
        members = idx[lo:hi]

        if is_regression:
            y = ry[members]
            rho = y - y.mean()
        else:
            y = ry[members]
            d = rd[members]
            z = rz[members]
            zc = z - z.mean()
            yc = y - y.mean()
            dc = d - d.mean()
            den = float(np.sum(zc * dc))
            if abs(den) <= 1e-10 * size:
                continue
            tau = float(np.sum(zc * yc)) / den
            rho = zc * (yc - dc * tau)

        state = _draw_features(p, mtry, state, feat_buf)
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for f in feat_buf[:mtry]:
            v = Xs[members, f]
            order = np.argsort(v, kind="stable")
            vs = v[order]
            cum = np.cumsum(rho[order])
            total = cum[-1]
            ks = np.nonzero(vs[1:] != vs[:-1])[0] + 1
            ks = ks[(ks >= min_node_size) & (ks <= size - min_node_size)]
            if ks.size == 0:
                continue
            lsum = cum[ks - 1]
            rsum = total - lsum
            gains = lsum * lsum / ks + rsum * rsum / (size - ks)
            j = int(np.argmax(gains))
            if gains[j] > best_gain:
                best_gain = float(gains[j])
                best_f = int(f)
                k = int(ks[j])
                best_thr = (vs[k - 1] + vs[k]) / 2.0

        if best_f < 0:
            continue

        go_left = Xs[members, best_f] <= best_thr
        left_members = members[go_left]
        right_members = members[~go_left]
        idx[lo : lo + left_members.size] = left_members
        idx[lo + left_members.size : hi] = right_members

        feature[node] = best_f
        threshold[node] = best_thr
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        node_lo[lid] = lo
        node_hi[lid] = lo + left_members.size
        node_lo[rid] = lo + left_members.size
        node_hi[rid] = hi
        stack.append(lid)
        stack.append(rid)

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
    )


def apply_tree(feature, threshold, left, right, base, X):
    """Leaf node id (tree-local) for each row of X, for the tree at `base`."""
    nq = X.shape[0]
    node = np.zeros(nq, dtype=np.int64)
    rows = np.arange(nq)
    while True:
        f = feature[base + node]
        internal = f >= 0
        if not internal.any():
            break
        sub = rows[internal]
        fsub = f[internal]
        go_left = X[sub, fsub] <= threshold[base + node[internal]]
        nxt = np.where(
            go_left,
            left[base + node[internal]],
            right[base + node[internal]],
        )
        node[sub] = nxt
    return node


def _admissible(drawn_t, q_cluster):
    ext = q_cluster < 0
    safe = np.maximum(q_cluster, 0)
    return ext | ~drawn_t[safe]


def predict_pass1(
    feature, threshold, left, right, tree_offset,
    agg_a, agg_b, drawn, q_cluster, Xq,
):
    """Sum per-leaf moment means over admissible trees.

    Returns (acc_a, acc_b, n_adm); the forest estimate is acc_a/acc_b and
    n_adm counts contributing trees per query.
    """
    n_trees = tree_offset.shape[0] - 1
    nq = Xq.shape[0]
    acc_a = np.zeros(nq)
    acc_b = np.zeros(nq)
    n_adm = np.zeros(nq, dtype=np.int64)
    for t in range(n_trees):
        base = tree_offset[t]
        if tree_offset[t + 1] == base:
            continue
        adm = _admissible(drawn[t], q_cluster)
        if not adm.any():
            continue
        leaf = apply_tree(feature, threshold, left, right, base, Xq)
        acc_a += np.where(adm, agg_a[base + leaf], 0.0)
        acc_b += np.where(adm, agg_b[base + leaf], 0.0)
        n_adm += adm
    return acc_a, acc_b, n_adm


def predict_pass2(
    feature, threshold, left, right, tree_offset,
    agg_a, agg_b, drawn, q_cluster, Xq,
    tau, bbar, group_size,
):
    """Little-bags moment accumulation for the variance estimate.

    Per-tree score psi_t = (A_t - tau*B_t)/bbar; a tree group counts only
    when every tree in it is admissible for the query. Returns
    (n_good_groups, sum of group means, sum of squared group means,
    sum of squared tree scores within good groups).
    """
    n_trees = tree_offset.shape[0] - 1
    nq = Xq.shape[0]
    n_good = np.zeros(nq, dtype=np.int64)
    s1 = np.zeros(nq)
    s2 = np.zeros(nq)
    st2 = np.zeros(nq)
    n_groups = n_trees // group_size
    for g in range(n_groups):
        g_sum = np.zeros(nq)
        g_sq = np.zeros(nq)
        g_ok = np.ones(nq, dtype=bool)
        for t in range(g * group_size, (g + 1) * group_size):
            base = tree_offset[t]
            if tree_offset[t + 1] == base:
                g_ok[:] = False
                continue
            adm = _admissible(drawn[t], q_cluster)
            leaf = apply_tree(feature, threshold, left, right, base, Xq)
            psi = (agg_a[base + leaf] - tau * agg_b[base + leaf]) / bbar
            g_ok &= adm
            g_sum += np.where(adm, psi, 0.0)
            g_sq += np.where(adm, psi * psi, 0.0)
        gm = g_sum / group_size
        n_good += g_ok
        s1 += np.where(g_ok, gm, 0.0)
        s2 += np.where(g_ok, gm * gm, 0.0)
        st2 += np.where(g_ok, g_sq, 0.0)
    return n_good, s1, s2, st2


def policy_search_depth2(X, gamma, thr_flat, thr_offset):
    """Exhaustive depth-<=2 tree search maximizing sum of |leaf gamma sums|.

    Enumeration order (first strict maximum wins): single leaf, then root
    (feature asc, threshold asc); within a side: no split, then
    (feature asc, threshold asc). Returns
    (root_f, root_thr, left_f, left_thr, right_f, right_thr) with -1
    feature ids marking leaves.
    """
    n, p = X.shape
    sort_idx = np.empty((p, n), dtype=np.int64)
    xs = np.empty((p, n))
    gs = np.empty((p, n))
    pos = []
    for f in range(p):
        o = np.argsort(X[:, f], kind="stable")
        sort_idx[f] = o
        xs[f] = X[o, f]
        gs[f] = gamma[o]
        th = thr_flat[thr_offset[f] : thr_offset[f + 1]]
        pos.append(np.searchsorted(xs[f], th, side="right"))

    total = float(np.sum(gamma))
    best_val = abs(total)
    best = (-1, 0.0, -1, 0.0, -1, 0.0)

    def side_best(mask, s_side):
        b_val = abs(s_side)
        b_f = -1
        b_thr = 0.0
        for f in range(p):
            th = thr_flat[thr_offset[f] : thr_offset[f + 1]]
            if th.size == 0:
                continue
            m = mask[sort_idx[f]]
            cum = np.concatenate(([0.0], np.cumsum(np.where(m, gs[f], 0.0))))
            lsum = cum[pos[f]]
            cand = np.abs(lsum) + np.abs(s_side - lsum)
            j = int(np.argmax(cand))
            if cand[j] > b_val:
                b_val = float(cand[j])
                b_f = f
                b_thr = float(th[j])
        return b_val, b_f, b_thr

    for f0 in range(p):
        th0 = thr_flat[thr_offset[f0] : thr_offset[f0 + 1]]
        for t0 in th0:
            mask_l = X[:, f0] <= t0
            s_l = float(np.sum(np.where(mask_l, gamma, 0.0)))
            s_r = total - s_l
            val_l, f_l, thr_l = side_best(mask_l, s_l)
            val_r, f_r, thr_r = side_best(~mask_l, s_r)
            val = val_l + val_r
            if val > best_val:
                best_val = val
                best = (f0, float(t0), f_l, thr_l, f_r, thr_r)
    return best
