"""Compiled inner loops for CART growth, forest prediction and TreeSHAP.

Trees live in flat arrays. Internal nodes have ``feature >= 0``; leaf class
counts are stored sparsely (``vptr``/``vcls``/``vcnt``, CSR by node).
"""

import numpy as np
from numba import njit

_REL_TOL = 1e-12


@njit(cache=True, nogil=True)
def build_tree(X, y, idx, n_classes, max_features, min_split, min_leaf, max_depth, seed):
    np.random.seed(seed)
    n_feat = X.shape[1]
    m = idx.shape[0]
    idx = idx.copy()
    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    cover = np.zeros(cap)
    decrease = np.zeros(cap)
    leaf_start = np.zeros(cap, dtype=np.int64)
    leaf_len = np.zeros(cap, dtype=np.int64)
    vcls_buf = np.zeros(m, dtype=np.int64)
    vcnt_buf = np.zeros(m)
    nv = 0

    st_node = np.zeros(cap, dtype=np.int64)
    st_start = np.zeros(cap, dtype=np.int64)
    st_end = np.zeros(cap, dtype=np.int64)
    st_depth = np.zeros(cap, dtype=np.int64)
    sp = 1
    st_end[0] = m
    n_nodes = 1

    counts = np.zeros(n_classes)
    feats = np.arange(n_feat)
    tmp = np.zeros(m, dtype=np.int64)
    vals = np.zeros(m)

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_start[sp]
        e = st_end[sp]
        depth = st_depth[sp]
        n_node = e - s

        counts[:] = 0.0
        for i in range(s, e):
            counts[y[idx[i]]] += 1.0
        sq = 0.0
        for c in range(n_classes):
            sq += counts[c] * counts[c]
        cover[node] = n_node

        best_f = -1
        best_thr = 0.0
        best_proxy = -1.0
        leaf = (n_node < min_split or n_node < 2 * min_leaf
                or (max_depth >= 0 and depth >= max_depth) or sq == n_node * n_node)
        if not leaf:
            for k in range(n_feat):
                feats[k] = k
            visited = 0
            k = 0
            while k < n_feat and visited < max_features:
                r = k + np.random.randint(0, n_feat - k)
                f = feats[r]
                feats[r] = feats[k]
                feats[k] = f
                k += 1
                for i in range(n_node):
                    vals[i] = X[idx[s + i], f]
                order = np.argsort(vals[:n_node], kind="mergesort")
                lo_v = vals[order[0]]
                hi_v = vals[order[n_node - 1]]
                if hi_v <= lo_v:
                    continue  # constant here, does not count toward max_features
                visited += 1
                lc = np.zeros(n_classes)
                rc = counts.copy()
                sl = 0.0
                sr = sq
                for p in range(n_node - 1):
                    c = y[idx[s + order[p]]]
                    sl += 2.0 * lc[c] + 1.0
                    lc[c] += 1.0
                    sr -= 2.0 * rc[c] - 1.0
                    rc[c] -= 1.0
                    a = vals[order[p]]
                    b = vals[order[p + 1]]
                    if b <= a:
                        continue
                    nl = p + 1
                    nr = n_node - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    proxy = sl / nl + sr / nr
                    thr = 0.5 * (a + b)
                    if thr >= b or not np.isfinite(thr):
                        thr = a
                    tol = _REL_TOL * max(1.0, abs(best_proxy))
                    if proxy > best_proxy + tol:
                        better = True
                    elif proxy >= best_proxy - tol:
                        better = f < best_f or (f == best_f and thr < best_thr)
                    else:
                        better = False
                    if better:
                        best_proxy = proxy
                        best_f = f
                        best_thr = thr
            if best_f < 0:
                leaf = True

        if leaf:
            leaf_start[node] = nv
            for c in range(n_classes):
                if counts[c] > 0:
                    vcls_buf[nv] = c
                    vcnt_buf[nv] = counts[c]
                    nv += 1
            leaf_len[node] = nv - leaf_start[node]
            continue

        # partition: x <= thr goes left
        nl = 0
        nr = 0
        for i in range(s, e):
            if X[idx[i], best_f] <= best_thr:
                idx[s + nl] = idx[i]
                nl += 1
            else:
                tmp[nr] = idx[i]
                nr += 1
        for i in range(nr):
            idx[s + nl + i] = tmp[i]

        feature[node] = best_f
        threshold[node] = best_thr
        decrease[node] = best_proxy - sq / n_node
        left[node] = n_nodes
        right[node] = n_nodes + 1
        n_nodes += 2
        st_node[sp] = right[node]
        st_start[sp] = s + nl
        st_end[sp] = e
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = left[node]
        st_start[sp] = s
        st_end[sp] = s + nl
        st_depth[sp] = depth + 1
        sp += 1

    vptr = np.zeros(n_nodes + 1, dtype=np.int64)
    for i in range(n_nodes):
        vptr[i + 1] = vptr[i] + leaf_len[i]
    vcls = np.zeros(vptr[n_nodes], dtype=np.int64)
    vcnt = np.zeros(vptr[n_nodes])
    for i in range(n_nodes):
        for j in range(leaf_len[i]):
            vcls[vptr[i] + j] = vcls_buf[leaf_start[i] + j]
            vcnt[vptr[i] + j] = vcnt_buf[leaf_start[i] + j]
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), cover[:n_nodes].copy(), decrease[:n_nodes].copy(),
            vptr, vcls, vcnt)


@njit(cache=True, nogil=True)
def predict_proba(X, node_ptr, feature, threshold, left, right, cover, vptr, vcls, vcnt, n_classes):
    n = X.shape[0]
    n_trees = node_ptr.shape[0] - 1
    out = np.zeros((n, n_classes))
    for r in range(n):
        for t in range(n_trees):
            base = node_ptr[t]
            node = 0
            while feature[base + node] >= 0:
                g = base + node
                if X[r, feature[g]] <= threshold[g]:
                    node = left[g]
                else:
                    node = right[g]
            g = base + node
            for j in range(vptr[g], vptr[g + 1]):
                out[r, vcls[j]] += vcnt[j] / cover[g]
        for c in range(n_classes):
            out[r, c] /= n_trees
    return out


@njit(cache=True, nogil=True)
def _extend(pw, pz, po, depth, zf, of):
    pz[depth] = zf
    po[depth] = of
    pw[depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[i + 1] += of * pw[i] * (i + 1) / (depth + 1)
        pw[i] = zf * pw[i] * (depth - i) / (depth + 1)


@njit(cache=True, nogil=True)
def _unwound_sum(pw, pz, po, depth, i):
    of = po[i]
    zf = pz[i]
    nxt = pw[depth]
    total = 0.0
    for j in range(depth - 1, -1, -1):
        if of != 0.0:
            tmp = nxt * (depth + 1) / ((j + 1) * of)
            total += tmp
            nxt = pw[j] - tmp * zf * (depth - j) / (depth + 1)
        else:
            total += pw[j] / (zf * (depth - j) / (depth + 1))
    return total


@njit(cache=True, nogil=True)
def shap_tree(X, feature, threshold, left, right, cover, vptr, vcls, vcnt, n_classes, phi):
    """Add one tree's path-dependent Shapley values into ``phi[row, class, feature]``.

    Each leaf contributes through its root path with repeated features merged
    (zero and one fractions multiplied).
    """
    n_nodes = feature.shape[0]
    parent = np.full(n_nodes, -1, dtype=np.int64)
    max_depth = 0
    depth_of = np.zeros(n_nodes, dtype=np.int64)
    for i in range(n_nodes):
        if feature[i] >= 0:
            parent[left[i]] = i
            parent[right[i]] = i
            depth_of[left[i]] = depth_of[i] + 1
            depth_of[right[i]] = depth_of[i] + 1
            if depth_of[i] + 1 > max_depth:
                max_depth = depth_of[i] + 1
    size = max_depth + 2
    uf = np.zeros(size, dtype=np.int64)
    uz = np.zeros(size)
    uo = np.zeros(size)
    pw = np.zeros(size)
    pz = np.zeros(size)
    po = np.zeros(size)

    for r in range(X.shape[0]):
        for leaf in range(n_nodes):
            if feature[leaf] >= 0:
                continue
            # merge the root path into unique (feature, zero, one) triples
            m = 0
            child = leaf
            node = parent[leaf]
            while node >= 0:
                f = feature[node]
                z = cover[child] / cover[node]
                goes_left = X[r, f] <= threshold[node]
                o = 1.0 if (child == left[node]) == goes_left else 0.0
                k = 0
                while k < m and uf[k] != f:
                    k += 1
                if k == m:
                    uf[m] = f
                    uz[m] = z
                    uo[m] = o
                    m += 1
                else:
                    uz[k] *= z
                    uo[k] *= o
                child = node
                node = parent[node]
            if m == 0:
                continue
            _extend(pw, pz, po, 0, 1.0, 1.0)
            for k in range(m):
                _extend(pw, pz, po, k + 1, uz[k], uo[k])
            for k in range(m):
                w = _unwound_sum(pw, pz, po, m, k + 1)
                scale = w * (uo[k] - uz[k]) / cover[leaf]
                for j in range(vptr[leaf], vptr[leaf + 1]):
                    phi[r, vcls[j], uf[k]] += scale * vcnt[j]
