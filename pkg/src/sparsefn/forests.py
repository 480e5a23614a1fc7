"""CART regression forests, forest kernel weights and local linear forests."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import InvalidArgument

_LEAF = -1


@njit(cache=True)
def _build_tree(X, y, rows, mtry, min_leaf, seed):
    np.random.seed(seed)
    n_rows = rows.size
    p = X.shape[1]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    idx = rows.copy()
    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n_rows
    top = 1
    n_nodes = 1
    xs = np.empty(n_rows)
    ys = np.empty(n_rows)
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        nn = hi - lo
        tot = 0.0
        sq = 0.0
        for r in range(lo, hi):
            v = y[idx[r]]
            tot += v
            sq += v * v
        value[node] = tot / nn
        if nn < 2 * min_leaf:
            continue
        parent = tot * tot / nn
        sse = sq - parent
        if sse <= 1e-14 * (sq + 1.0):
            continue
        feats = np.random.permutation(p)[:mtry]
        feats.sort()
        best = parent + 1e-12 * sse
        best_f = -1
        best_t = 0.0
        for f in feats:
            for r in range(nn):
                xs[r] = X[idx[lo + r], f]
            order = np.argsort(xs[:nn], kind="mergesort")
            for r in range(nn):
                ys[r] = y[idx[lo + order[r]]]
            cum = 0.0
            for i in range(nn - 1):
                cum += ys[i]
                n_left = i + 1
                a = xs[order[i]]
                b = xs[order[i + 1]]
                if b <= a:
                    continue
                if n_left < min_leaf or nn - n_left < min_leaf:
                    continue
                rest = tot - cum
                gain = cum * cum / n_left + rest * rest / (nn - n_left)
                if gain > best:
                    best = gain
                    best_f = f
                    best_t = 0.5 * (a + b)
        if best_f < 0:
            continue
        # partition idx[lo:hi] in place
        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], best_f] <= best_t:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        if i == lo or i == hi:
            continue
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top] = n_nodes + 1
        st_lo[top] = i
        st_hi[top] = hi
        top += 1
        st_node[top] = n_nodes
        st_lo[top] = lo
        st_hi[top] = i
        top += 1
        n_nodes += 2
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@njit(cache=True)
def _apply(X, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass
class ForestParams:
    n_trees: int = 100
    mtry: Optional[int] = None
    min_leaf: int = 5
    subsample_fraction: float = 1.0
    bootstrap: bool = True
    seed: int = 0

    def resolve_mtry(self, p: int) -> int:
        mtry = self.mtry if self.mtry is not None else max(1, int(math.floor(math.sqrt(p))))
        if not 1 <= mtry <= p:
            raise InvalidArgument(f"mtry must lie in [1, {p}], got {mtry}")
        return mtry


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    inbag: np.ndarray  # multiplicity of each training row
    train_leaf: np.ndarray  # leaf reached by each training row

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X) -> np.ndarray:
        return _apply(np.ascontiguousarray(X, dtype=np.float64), self.feature, self.threshold, self.left, self.right)

    def leaf_sizes(self) -> np.ndarray:
        return np.bincount(self.train_leaf, weights=self.inbag, minlength=self.n_nodes)


@dataclass(frozen=True)
class Forest:
    trees: tuple
    X: np.ndarray
    y: np.ndarray
    params: ForestParams

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def fit_forest(X, y, params: Optional[ForestParams] = None) -> Forest:
    """Grow ``params.n_trees`` CART trees on bootstrap resamples.

    Each split maximizes variance reduction over ``mtry`` random features,
    scanning midpoints between consecutive distinct values; ties go to the
    lowest feature index, then the lowest threshold.
    """
    params = params or ForestParams()
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise InvalidArgument("X must be (n, p) and y length n")
    n, p = X.shape
    if n < 2:
        raise InvalidArgument("a forest needs at least 2 training rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise InvalidArgument("training data must not contain missing values")
    if params.n_trees < 1 or params.min_leaf < 1 or not 0 < params.subsample_fraction <= 1:
        raise InvalidArgument("invalid forest parameters")
    mtry = params.resolve_mtry(p)
    size = max(1, int(math.ceil(params.subsample_fraction * n)))
    rng = np.random.default_rng(params.seed)
    trees = []
    for _ in range(params.n_trees):
        if params.bootstrap:
            rows = rng.integers(0, n, size=size)
        else:
            rows = rng.permutation(n)[:size]
        tseed = int(rng.integers(0, 2**31 - 1))
        feat, thr, lft, rgt, val = _build_tree(X, y, rows.astype(np.int64), mtry, params.min_leaf, tseed)
        inbag = np.bincount(rows, minlength=n).astype(float)
        leaf = _apply(X, feat, thr, lft, rgt)
        trees.append(Tree(feat, thr, lft, rgt, val, inbag, leaf))
    return Forest(tuple(trees), X, y, params)


def forest_predict(f: Forest, x) -> np.ndarray:
    """Mean over trees of the landed leaf's (inbag) mean. ``x`` may be one
    query or a matrix of queries."""
    xq = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.zeros(xq.shape[0])
    for t in f.trees:
        out += t.value[t.apply(xq)]
    out /= f.n_trees
    return out if np.ndim(x) > 1 else out[0]


def forest_weight_matrix(f: Forest, Xq) -> np.ndarray:
    """Forest kernel weights of every training row for each query row.

    Row ``q`` holds ``(1/B) sum_b c_bi 1{i in leaf_b(x_q)} / |leaf_b(x_q)|``
    with leaf sizes counted by inbag multiplicity ``c_bi``.
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=np.float64))
    W = np.zeros((Xq.shape[0], f.X.shape[0]))
    for t in f.trees:
        lq = t.apply(Xq)
        share = np.divide(t.inbag, t.leaf_sizes()[t.train_leaf], out=np.zeros_like(t.inbag), where=t.inbag > 0)
        W += (lq[:, None] == t.train_leaf[None, :]) * share[None, :]
    W /= f.n_trees
    return W


def forest_weights(f: Forest, x) -> np.ndarray:
    return forest_weight_matrix(f, np.asarray(x, dtype=float)[None, :])[0]


def default_ridge(weights: np.ndarray, X: np.ndarray) -> np.ndarray:
    """0.01 x trace of the weighted, centered design covariance (per query)."""
    m1 = weights @ X
    m2 = weights @ (X * X)
    return 0.01 * np.maximum((m2 - m1 * m1).sum(axis=1), 0.0)


def llf_predict(f: Forest, X, y, x, ridge: Optional[float] = None) -> np.ndarray:
    """Local linear forest prediction at one or many queries.

    Solves the forest-weighted least squares problem in ``(mu, beta)`` for
    ``y_i ~ mu + (x_i - x)' beta`` with ``ridge * |beta|^2`` added and returns
    ``mu``. ``ridge=None`` uses :func:`default_ridge`.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    xq = np.atleast_2d(np.asarray(x, dtype=float))
    if ridge is not None and ridge < 0:
        raise InvalidArgument("ridge must be nonnegative")
    W = forest_weight_matrix(f, xq)
    lam = default_ridge(W, X) if ridge is None else np.full(xq.shape[0], float(ridge))
    # centered at the x-mean; the intercept at x is translation invariant
    center = X.mean(axis=0)
    Z = np.hstack([np.ones((X.shape[0], 1)), X - center])
    zq = np.hstack([np.ones((xq.shape[0], 1)), xq - center])
    WZ = W[:, :, None] * Z[None, :, :]
    M = np.matmul(WZ.transpose(0, 2, 1), Z)
    b = np.einsum("qij,i->qj", WZ, y)
    pen = np.ones(Z.shape[1])
    pen[0] = 0.0
    if ridge is not None and ridge == 0:
        cond = np.linalg.cond(M)
        bad = ~np.isfinite(cond) | (cond > 1e12)
        if bad.any():
            warnings.warn(
                f"singular local linear system at {int(bad.sum())} queries; using ridge 1e-6",
                stacklevel=2,
            )
            lam = np.where(bad, 1e-6, lam)
    A = M + lam[:, None, None] * np.diag(pen)[None, :, :]
    try:
        coef = np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        coef = np.stack([np.linalg.lstsq(a, bb, rcond=None)[0] for a, bb in zip(A, b)])
    mu = (coef * zq).sum(axis=1)
    return mu if np.ndim(x) > 1 else mu[0]
