"""Depth-limited CART trees grown level by level on presorted features.

One presort of the training matrix serves every tree of a forest or boosting
run: bootstrap resampling and row subsampling are expressed as per-row
weights instead of copies, so the sorted order never changes.  Rows with
zero weight are still routed to leaves, which boosting uses to update its
training predictions.

Each tree draws from its own pair of seeds, so a forest grown to depth d is
exactly the depth-d truncation of the same forest grown deeper, and the
first m rounds of a boosting run do not depend on how many rounds follow.
The ensemble kernels exploit this to score several depths or round counts
from one fit (``eval_*`` arguments).

Gini impurity of a 0/1 target is twice its within-node variance, so the
variance-reduction kernel below also realizes the Gini criterion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@njit(cache=True)
def _grow(XT, XS, order, y, w, max_depth, min_leaf, mtry, seed):
    """Grow one tree level by level; returns node arrays and row -> leaf.

    ``XT`` is the transposed design (features x rows), ``order[j]`` the row
    order sorting feature ``j`` and ``XS[j]`` the sorted values themselves.  Within a level every feature is scanned
    once in sorted order, updating the running left-child sums of whichever
    node each row belongs to.  Features are visited in index order and a
    candidate must strictly beat the incumbent, so ties go to the lowest
    feature index and then to the lowest threshold.  Thresholds are
    midpoints between consecutive distinct values.  ``mtry < p`` restricts
    each node to a random feature subset drawn from ``seed``.
    """
    p, n = XT.shape
    max_nodes = 2 * n - 1
    if max_depth < 40:
        max_nodes = min(max_nodes, 2 ** (max_depth + 1) - 1)
    feature = -np.ones(max_nodes, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = -np.ones(max_nodes, dtype=np.int64)
    right = -np.ones(max_nodes, dtype=np.int64)
    node_of_row = np.zeros(n, dtype=np.int64)
    slot = np.empty(n, dtype=np.int64)
    perm = np.arange(p)
    wy = w * y
    if mtry < p:
        np.random.seed(seed)
    n_nodes = 1
    lo, hi = 0, 1
    for _depth in range(max_depth):
        K = hi - lo
        W = np.zeros(K)
        S = np.zeros(K)
        ymin = np.full(K, np.inf)
        ymax = np.full(K, -np.inf)
        for r in range(n):
            k = node_of_row[r] - lo
            if k >= 0 and k < K and w[r] > 0:
                slot[r] = k
                W[k] += w[r]
                S[k] += w[r] * y[r]
                if y[r] < ymin[k]:
                    ymin[k] = y[r]
                if y[r] > ymax[k]:
                    ymax[k] = y[r]
            else:
                slot[r] = -1
        splittable = np.zeros(K, dtype=np.bool_)
        any_split = False
        for k in range(K):
            if W[k] >= 2 * min_leaf and ymax[k] > ymin[k]:
                splittable[k] = True
                any_split = True
        if not any_split or p == 0:
            break
        for r in range(n):
            if slot[r] >= 0 and not splittable[slot[r]]:
                slot[r] = -1
        mask = np.zeros((K, p), dtype=np.bool_)
        any_mask = np.zeros(p, dtype=np.bool_)
        for k in range(K):
            if not splittable[k]:
                continue
            if mtry >= p:
                for j in range(p):
                    mask[k, j] = True
                    any_mask[j] = True
            else:
                for i in range(mtry):
                    jj = i + np.random.randint(p - i)
                    tmp = perm[i]
                    perm[i] = perm[jj]
                    perm[jj] = tmp
                    mask[k, perm[i]] = True
                    any_mask[perm[i]] = True
        # parent term S^2/W is constant per node, so compare sl^2/wl + sr^2/wr
        best_gain = np.empty(K)
        for k in range(K):
            best_gain[k] = S[k] * S[k] / W[k] if W[k] > 0 else 0.0
        best_feat = -np.ones(K, dtype=np.int64)
        best_thr = np.zeros(K)
        WL = np.zeros(K)
        SL = np.zeros(K)
        last = np.zeros(K)
        started = np.zeros(K, dtype=np.bool_)
        all_feats = mtry >= p
        for j in range(p):
            if not any_mask[j]:
                continue
            WL[:] = 0.0
            SL[:] = 0.0
            started[:] = False
            for idx in range(n):
                r = order[j, idx]
                k = slot[r]
                if k < 0:
                    continue
                if not all_feats and not mask[k, j]:
                    continue
                v = XS[j, idx]
                if started[k] and v > last[k]:
                    wl = WL[k]
                    wrt = W[k] - wl
                    if wl >= min_leaf and wrt >= min_leaf:
                        sl = SL[k]
                        sr = S[k] - sl
                        gain = sl * sl / wl + sr * sr / wrt
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = j
                            thr = 0.5 * (last[k] + v)
                            if thr >= v:
                                thr = last[k]
                            best_thr[k] = thr
                WL[k] += w[r]
                SL[k] += wy[r]
                last[k] = v
                started[k] = True
        first_child = n_nodes
        for k in range(K):
            if best_feat[k] >= 0:
                node = lo + k
                feature[node] = best_feat[k]
                threshold[node] = best_thr[k]
                left[node] = n_nodes
                right[node] = n_nodes + 1
                n_nodes += 2
        if n_nodes == first_child:
            break
        for r in range(n):
            node = node_of_row[r]
            if node >= lo and node < hi and feature[node] >= 0:
                if XT[feature[node], r] <= threshold[node]:
                    node_of_row[r] = left[node]
                else:
                    node_of_row[r] = right[node]
        lo, hi = first_child, n_nodes
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], node_of_row


@njit(cache=True)
def _node_values(feature, threshold, left, right, XT, num, den):
    """``sum(num) / sum(den)`` over the training rows passing through each node.

    Rows are accumulated in index order for every node on their path, so a
    node's value does not depend on how deep the tree below it was grown.
    """
    m = feature.shape[0]
    a = np.zeros(m)
    b = np.zeros(m)
    n = XT.shape[1]
    for r in range(n):
        node = 0
        while True:
            a[node] += num[r]
            b[node] += den[r]
            f = feature[node]
            if f < 0:
                break
            if XT[f, r] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
    out = np.zeros(m)
    for k in range(m):
        if b[k] > 0:
            out[k] = a[k] / b[k]
    return out


@njit(cache=True)
def _route(XE, i, feature, threshold, left, right, depth_limit):
    node = 0
    d = 0
    while feature[node] >= 0 and d < depth_limit:
        if XE[i, feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
        d += 1
    return node


@njit(cache=True)
def _store(F, TH, L, R, V, NN, t, f, th, lft, rgt, val):
    m = f.shape[0]
    NN[t] = m
    for k in range(m):
        F[t, k] = f[k]
        TH[t, k] = th[k]
        L[t, k] = lft[k]
        R[t, k] = rgt[k]
        V[t, k] = val[k]


@njit(cache=True)
def _forest_kernel(XT, XS, order, y, n_trees, max_depth, min_leaf, mtry, bootstrap, seeds, cap,
                   XE, eval_depths):
    """Random forest; leaf values are pre-divided by ``n_trees``.

    Returns padded per-tree node arrays plus, for every entry of
    ``eval_depths``, the forest prediction on ``XE`` truncated at that depth.
    """
    p, n = XT.shape
    F = -np.ones((n_trees, cap), dtype=np.int64)
    TH = np.zeros((n_trees, cap))
    L = -np.ones((n_trees, cap), dtype=np.int64)
    R = -np.ones((n_trees, cap), dtype=np.int64)
    V = np.zeros((n_trees, cap))
    NN = np.zeros(n_trees, dtype=np.int64)
    n_eval = XE.shape[0]
    pe = np.zeros((eval_depths.shape[0], n_eval))
    for t in range(n_trees):
        np.random.seed(seeds[t, 0])
        if bootstrap:
            w = np.zeros(n)
            for _ in range(n):
                w[np.random.randint(n)] += 1.0
        else:
            w = np.ones(n)
        f, th, lft, rgt, _leaf = _grow(XT, XS, order, y, w, max_depth, min_leaf, mtry, seeds[t, 1])
        val = _node_values(f, th, lft, rgt, XT, w * y, w) / n_trees
        _store(F, TH, L, R, V, NN, t, f, th, lft, rgt, val)
        for di in range(eval_depths.shape[0]):
            for i in range(n_eval):
                pe[di, i] += val[_route(XE, i, f, th, lft, rgt, eval_depths[di])]
    return F, TH, L, R, V, NN, pe


@njit(cache=True)
def _boost_kernel(XT, XS, order, y, n_trees, lr, max_depth, min_leaf, mtry, subsample,
                  classification, base, seeds, cap, XE, checkpoints):
    """Least-squares or logistic (one Newton step per leaf) gradient boosting.

    ``checkpoints`` lists round counts at which the raw score on ``XE``
    (before the logistic link) is recorded.
    """
    p, n = XT.shape
    F = -np.ones((n_trees, cap), dtype=np.int64)
    TH = np.zeros((n_trees, cap))
    L = -np.ones((n_trees, cap), dtype=np.int64)
    R = -np.ones((n_trees, cap), dtype=np.int64)
    V = np.zeros((n_trees, cap))
    NN = np.zeros(n_trees, dtype=np.int64)
    n_eval = XE.shape[0]
    pe = np.zeros((checkpoints.shape[0], n_eval))
    acc = np.zeros(n_eval)
    score = np.full(n, base)
    resid = np.empty(n)
    hess = np.empty(n)
    w = np.ones(n)
    ci = 0
    for t in range(n_trees):
        np.random.seed(seeds[t, 0])
        if subsample < 1.0:
            for i in range(n):
                w[i] = 1.0 if np.random.random() < subsample else 0.0
        for i in range(n):
            if classification:
                s = score[i]
                if s >= 0:
                    pr = 1.0 / (1.0 + np.exp(-s))
                else:
                    es = np.exp(s)
                    pr = es / (1.0 + es)
                resid[i] = y[i] - pr
                hess[i] = max(pr * (1.0 - pr), 1e-6)
            else:
                resid[i] = y[i] - score[i]
                hess[i] = 1.0
        f, th, lft, rgt, leaf = _grow(XT, XS, order, resid, w, max_depth, min_leaf, mtry, seeds[t, 1])
        val = _node_values(f, th, lft, rgt, XT, w * resid, w * hess)
        for k in range(val.shape[0]):
            if classification:
                val[k] = min(max(val[k], -4.0), 4.0)
            val[k] *= lr
        for i in range(n):
            score[i] += val[leaf[i]]
        _store(F, TH, L, R, V, NN, t, f, th, lft, rgt, val)
        if n_eval > 0:
            for i in range(n_eval):
                acc[i] += val[_route(XE, i, f, th, lft, rgt, max_depth)]
            while ci < checkpoints.shape[0] and checkpoints[ci] == t + 1:
                for i in range(n_eval):
                    pe[ci, i] = base + acc[i]
                ci += 1
    return F, TH, L, R, V, NN, pe


@njit(cache=True)
def _ensemble_sum(X, feature, threshold, left, right, value, n_nodes):
    """Sum over trees of the leaf value reached by each row of ``X``."""
    n = X.shape[0]
    out = np.zeros(n)
    for t in range(feature.shape[0]):
        if n_nodes[t] == 0:
            continue
        for i in range(n):
            node = 0
            while feature[t, node] >= 0:
                if X[i, feature[t, node]] <= threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[i] += value[t, node]
    return out


def tree_seeds(seed, n_trees):
    """Per-tree seed pairs; the first m rows do not depend on ``n_trees``."""
    return np.random.default_rng(seed).integers(0, 2**31 - 1, size=(n_trees, 2))


def _capacity(max_depth, n):
    return int(min(2 ** (min(max_depth, 40) + 1) - 1, 2 * n - 1))


def _pack(F, TH, L, R, V, NN):
    m = int(NN.max()) if NN.size else 0
    return {
        "feature": np.ascontiguousarray(F[:, :m]),
        "threshold": np.ascontiguousarray(TH[:, :m]),
        "left": np.ascontiguousarray(L[:, :m]),
        "right": np.ascontiguousarray(R[:, :m]),
        "value": np.ascontiguousarray(V[:, :m]),
        "n_nodes": NN,
    }


def _eval_matrix(XE, p):
    if XE is None:
        return np.zeros((0, p))
    return np.ascontiguousarray(XE, dtype=float)


def fit_forest(pre: Presorted, y, n_trees, max_depth, min_leaf, mtry, bootstrap, seed,
               XE=None, eval_depths=()):
    """Fit a forest; returns ``(trees, staged)`` with one staged row per eval depth."""
    y = np.ascontiguousarray(y, dtype=float)
    out = _forest_kernel(
        pre.XT, pre.XS, pre.order, y, int(n_trees), int(max_depth), float(min_leaf), int(mtry),
        bool(bootstrap), tree_seeds(seed, n_trees), _capacity(max_depth, pre.n_rows),
        _eval_matrix(XE, pre.n_features), np.asarray(eval_depths, dtype=np.int64),
    )
    return _pack(*out[:6]), out[6]


def fit_boosting(pre: Presorted, y, n_trees, lr, max_depth, min_leaf, mtry, subsample,
                 classification, base, seed, XE=None, checkpoints=()):
    """Fit a boosting run; ``staged`` rows hold raw scores at each checkpoint."""
    y = np.ascontiguousarray(y, dtype=float)
    cps = np.asarray(sorted(set(int(c) for c in checkpoints)), dtype=np.int64)
    out = _boost_kernel(
        pre.XT, pre.XS, pre.order, y, int(n_trees), float(lr), int(max_depth), float(min_leaf),
        int(mtry), float(subsample), bool(classification), float(base),
        tree_seeds(seed, n_trees), _capacity(max_depth, pre.n_rows),
        _eval_matrix(XE, pre.n_features), cps,
    )
    return _pack(*out[:6]), out[6]


def ensemble_sum(trees: dict, X):
    X = np.ascontiguousarray(X, dtype=float)
    if trees["feature"].shape[0] == 0:
        return np.zeros(X.shape[0])
    return _ensemble_sum(
        X, trees["feature"], trees["threshold"], trees["left"], trees["right"], trees["value"],
        trees["n_nodes"],
    )


@dataclass
class Presorted:
    """Training design prepared for repeated tree growing."""

    XT: np.ndarray
    XS: np.ndarray
    order: np.ndarray

    @classmethod
    def from_matrix(cls, X):
        X = np.asarray(X, dtype=float)
        XT = np.ascontiguousarray(X.T)
        order = np.ascontiguousarray(np.argsort(XT, axis=1, kind="stable"))
        XS = np.ascontiguousarray(np.take_along_axis(XT, order, axis=1))
        return cls(XT, XS, order)

    @property
    def n_rows(self):
        return self.XT.shape[1]

    @property
    def n_features(self):
        return self.XT.shape[0]


@dataclass
class TreeStructure:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_of_row: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.shape[0]


def grow_tree(pre: Presorted, y, w, max_depth, min_leaf, max_features=None, seed=0):
    """Grow a single tree; ``max_features`` (int) candidates per node, default all."""
    p = pre.n_features
    mtry = p if max_features is None else int(max_features)
    f, thr, lft, rgt, leaf = _grow(
        pre.XT, pre.XS, pre.order,
        np.ascontiguousarray(y, dtype=float), np.ascontiguousarray(w, dtype=float),
        int(max_depth), float(min_leaf), mtry, int(seed),
    )
    return TreeStructure(f, thr, lft, rgt, leaf)


def node_values(tree: TreeStructure, pre: Presorted, num, den):
    return _node_values(
        tree.feature, tree.threshold, tree.left, tree.right, pre.XT,
        np.ascontiguousarray(num, dtype=float), np.ascontiguousarray(den, dtype=float),
    )
