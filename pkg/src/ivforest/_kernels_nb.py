"""Numba-compiled twins of the kernels in `_kernels_np`.

Same algorithms, node numbering, enumeration order, and tie-breaking; loops
instead of vectorized ops. Compiled lazily on first call (cache=True), with
nogil so tree-level thread pools get real parallelism.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


@njit(cache=True, nogil=True)
def _splitmix64(state):
    state = state + _GOLD
    z = state
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    z = z ^ (z >> _S31)
    return state, z


def splitmix64(state):
    """Python-callable wrapper matching `_kernels_np.splitmix64`."""
    s, z = _splitmix64(np.uint64(state))
    return int(s), int(z)


@njit(cache=True, nogil=True)
def _draw_features(p, mtry, state, buf):
    for k in range(p):
        buf[k] = k
    for k in range(mtry):
        state, z = _splitmix64(state)
        j = k + np.int64(z % np.uint64(p - k))
        tmp = buf[k]
        buf[k] = buf[j]
        buf[j] = tmp
    return state


@njit(cache=True, nogil=True)
def _grow_tree_impl(Xs, ry, rd, rz, is_regression, min_node_size, mtry, rng_state):
    n, p = Xs.shape
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, dtype=np.int32)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    node_lo = np.zeros(max_nodes, dtype=np.int64)
    node_hi = np.zeros(max_nodes, dtype=np.int64)

    idx = np.arange(n)
    stack = np.empty(max_nodes, dtype=np.int64)
    stack[0] = 0
    top = 1
    node_lo[0] = 0
    node_hi[0] = n
    n_nodes = 1
    state = rng_state

    feat_buf = np.empty(p, dtype=np.int64)
    rho = np.empty(n, dtype=np.float64)
    vbuf = np.empty(n, dtype=np.float64)
    tmp = np.empty(n, dtype=np.int64)

    while top > 0:
        top -= 1
        node = stack[top]
        lo = node_lo[node]
        hi = node_hi[node]
        size = hi - lo
        if size < 2 * min_node_size:
            continue

        if is_regression:
            s = 0.0
            for j in range(lo, hi):
                s += ry[idx[j]]
            ybar = s / size
            for j in range(size):
                rho[j] = ry[idx[lo + j]] - ybar
        else:
            sy = 0.0
            sd = 0.0
            sz = 0.0
            for j in range(lo, hi):
                i = idx[j]
                sy += ry[i]
                sd += rd[i]
                sz += rz[i]
            ybar = sy / size
            dbar = sd / size
            zbar = sz / size
            num = 0.0
            den = 0.0
            for j in range(lo, hi):
                i = idx[j]
                zc = rz[i] - zbar
                num += zc * (ry[i] - ybar)
                den += zc * (rd[i] - dbar)
            if abs(den) <= 1e-10 * size:
                continue
            tau = num / den
            for j in range(size):
                i = idx[lo + j]
                rho[j] = (rz[i] - zbar) * ((ry[i] - ybar) - (rd[i] - dbar) * tau)

        state = _draw_features(p, mtry, state, feat_buf)
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for fi in range(mtry):
            f = feat_buf[fi]
            for j in range(size):
                vbuf[j] = Xs[idx[lo + j], f]
            order = np.argsort(vbuf[:size], kind="mergesort")
            cum = 0.0
            total = 0.0
            for j in range(size):
                total += rho[order[j]]
            prev = vbuf[order[0]]
            for k in range(1, size):
                cum += rho[order[k - 1]]
                cur = vbuf[order[k]]
                if cur != prev:
                    if k >= min_node_size and k <= size - min_node_size:
                        lsum = cum
                        rsum = total - lsum
                        gain = lsum * lsum / k + rsum * rsum / (size - k)
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            best_thr = (prev + cur) / 2.0
                    prev = cur

        if best_f < 0:
            continue

        nl = 0
        for j in range(size):
            i = idx[lo + j]
            if Xs[i, best_f] <= best_thr:
                tmp[nl] = i
                nl += 1
        nr = nl
        for j in range(size):
            i = idx[lo + j]
            if Xs[i, best_f] > best_thr:
                tmp[nr] = i
                nr += 1
        for j in range(size):
            idx[lo + j] = tmp[j]

        feature[node] = best_f
        threshold[node] = best_thr
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        node_lo[lid] = lo
        node_hi[lid] = lo + nl
        node_lo[rid] = lo + nl
        node_hi[rid] = hi
        stack[top] = lid
        top += 1
        stack[top] = rid
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
    )


def grow_tree(Xs, ry, rd, rz, is_regression, min_node_size, mtry, rng_state):
    return _grow_tree_impl(
        Xs, ry, rd, rz, is_regression, min_node_size, mtry, np.uint64(rng_state)
    )


@njit(cache=True, nogil=True)
def apply_tree(feature, threshold, left, right, base, X):
    nq = X.shape[0]
    out = np.empty(nq, dtype=np.int64)
    for q in range(nq):
        node = 0
        while feature[base + node] >= 0:
            if X[q, feature[base + node]] <= threshold[base + node]:
                node = left[base + node]
            else:
                node = right[base + node]
        out[q] = node
    return out


@njit(cache=True, nogil=True)
def predict_pass1(
    feature, threshold, left, right, tree_offset,
    agg_a, agg_b, drawn, q_cluster, Xq,
):
    n_trees = tree_offset.shape[0] - 1
    nq = Xq.shape[0]
    acc_a = np.zeros(nq)
    acc_b = np.zeros(nq)
    n_adm = np.zeros(nq, dtype=np.int64)
    for t in range(n_trees):
        base = tree_offset[t]
        if tree_offset[t + 1] == base:
            continue
        for q in range(nq):
            c = q_cluster[q]
            if c >= 0 and drawn[t, c]:
                continue
            node = 0
            while feature[base + node] >= 0:
                if Xq[q, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc_a[q] += agg_a[base + node]
            acc_b[q] += agg_b[base + node]
            n_adm[q] += 1
    return acc_a, acc_b, n_adm


@njit(cache=True, nogil=True)
def predict_pass2(
    feature, threshold, left, right, tree_offset,
    agg_a, agg_b, drawn, q_cluster, Xq,
    tau, bbar, group_size,
):
    n_trees = tree_offset.shape[0] - 1
    nq = Xq.shape[0]
    n_good = np.zeros(nq, dtype=np.int64)
    s1 = np.zeros(nq)
    s2 = np.zeros(nq)
    st2 = np.zeros(nq)
    g_sum = np.empty(nq)
    g_sq = np.empty(nq)
    g_ok = np.empty(nq, dtype=np.bool_)
    n_groups = n_trees // group_size
    for g in range(n_groups):
        for q in range(nq):
            g_sum[q] = 0.0
            g_sq[q] = 0.0
            g_ok[q] = True
        for t in range(g * group_size, (g + 1) * group_size):
            base = tree_offset[t]
            if tree_offset[t + 1] == base:
                for q in range(nq):
                    g_ok[q] = False
                continue
            for q in range(nq):
                c = q_cluster[q]
                if c >= 0 and drawn[t, c]:
                    g_ok[q] = False
                    continue
                node = 0
                while feature[base + node] >= 0:
                    if Xq[q, feature[base + node]] <= threshold[base + node]:
                        node = left[base + node]
                    else:
                        node = right[base + node]
                psi = (agg_a[base + node] - tau[q] * agg_b[base + node]) / bbar[q]
                g_sum[q] += psi
                g_sq[q] += psi * psi
        for q in range(nq):
            if g_ok[q]:
                gm = g_sum[q] / group_size
                n_good[q] += 1
                s1[q] += gm
                s2[q] += gm * gm
                st2[q] += g_sq[q]
    return n_good, s1, s2, st2


@njit(cache=True, nogil=True)
def _policy_side_best(mask, s_side, sort_idx, gs, thr_flat, thr_offset, pos_flat, cum):
    p = sort_idx.shape[0]
    n = sort_idx.shape[1]
    b_val = abs(s_side)
    b_f = -1
    b_thr = 0.0
    for f in range(p):
        lo = thr_offset[f]
        hi = thr_offset[f + 1]
        if hi == lo:
            continue
        cum[0] = 0.0
        for i in range(n):
            v = gs[f, i] if mask[sort_idx[f, i]] else 0.0
            cum[i + 1] = cum[i] + v
        for j in range(lo, hi):
            lsum = cum[pos_flat[j]]
            cand = abs(lsum) + abs(s_side - lsum)
            if cand > b_val:
                b_val = cand
                b_f = f
                b_thr = thr_flat[j]
    return b_val, b_f, b_thr


@njit(cache=True, nogil=True)
def _policy_search_impl(X, gamma, thr_flat, thr_offset, sort_idx, xs, gs, pos_flat):
    n, p = X.shape
    total = 0.0
    for i in range(n):
        total += gamma[i]
    best_val = abs(total)
    br_f = -1
    br_thr = 0.0
    bl_f = -1
    bl_thr = 0.0
    brr_f = -1
    brr_thr = 0.0

    mask_l = np.empty(n, dtype=np.bool_)
    mask_r = np.empty(n, dtype=np.bool_)
    cum = np.empty(n + 1)

    for f0 in range(p):
        for j0 in range(thr_offset[f0], thr_offset[f0 + 1]):
            t0 = thr_flat[j0]
            s_l = 0.0
            for i in range(n):
                if X[i, f0] <= t0:
                    mask_l[i] = True
                    mask_r[i] = False
                    s_l += gamma[i]
                else:
                    mask_l[i] = False
                    mask_r[i] = True
            s_r = total - s_l
            val_l, f_l, thr_l = _policy_side_best(
                mask_l, s_l, sort_idx, gs, thr_flat, thr_offset, pos_flat, cum
            )
            val_r, f_r, thr_r = _policy_side_best(
                mask_r, s_r, sort_idx, gs, thr_flat, thr_offset, pos_flat, cum
            )
            val = val_l + val_r
            if val > best_val:
                best_val = val
                br_f = f0
                br_thr = t0
                bl_f = f_l
                bl_thr = thr_l
                brr_f = f_r
                brr_thr = thr_r
    return br_f, br_thr, bl_f, bl_thr, brr_f, brr_thr


def policy_search_depth2(X, gamma, thr_flat, thr_offset):
    """Numba-backed twin of `_kernels_np.policy_search_depth2`."""
    n, p = X.shape
    sort_idx = np.empty((p, n), dtype=np.int64)
    xs = np.empty((p, n))
    gs = np.empty((p, n))
    pos_flat = np.empty(thr_flat.shape[0], dtype=np.int64)
    for f in range(p):
        o = np.argsort(X[:, f], kind="stable")
        sort_idx[f] = o
        xs[f] = X[o, f]
        gs[f] = gamma[o]
        lo, hi = thr_offset[f], thr_offset[f + 1]
        pos_flat[lo:hi] = np.searchsorted(xs[f], thr_flat[lo:hi], side="right")
    return _policy_search_impl(
        X, gamma, thr_flat, thr_offset, sort_idx, xs, gs, pos_flat
    )
