"""Sparse functional PCA by conditional expectation (PACE).

Mean and covariance are estimated by local linear smoothing of pooled
observations; scores of each curve are Gaussian conditional means given its
own sparse observations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InsufficientData, InvalidArgument, NumericFailure
from .funcdata import Grid, IncompleteMatrix, SparseCurve, SparseFunctionalDataset

BANDWIDTH_FRACTIONS = (0.05, 0.1, 0.15, 0.2, 0.3)
NOISE_FLOOR = 1e-8


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


# --- local linear smoothers on aggregated data ------------------------------


def _kernel_factors(ev: np.ndarray, support: np.ndarray, h: float):
    d = support[None, :] - ev[:, None]
    k = epanechnikov(d / h)
    return k, k * d, k * d * d


def _ll1d_once(ev, support, counts, sums, h):
    a0, a1, a2 = _kernel_factors(ev, support, h)
    s0, s1, s2 = a0 @ counts, a1 @ counts, a2 @ counts
    r0, r1 = a0 @ sums, a1 @ sums
    det = s0 * s2 - s1 * s1
    ok = (s0 > 0) & (det > 1e-10 * np.maximum(s0 * s0, 1e-300) * h * h)
    with np.errstate(invalid="ignore", divide="ignore"):
        fit = (s2 * r0 - s1 * r1) / det
    return fit, ok


def local_linear_1d(ev, support, counts, sums, h: float, warn: bool = True) -> np.ndarray:
    """Local linear fit at ``ev`` from per-support-point counts and sums.

    Points whose kernel window holds too little data get a locally widened
    bandwidth.
    """
    ev = np.asarray(ev, dtype=float)
    fit, ok = _ll1d_once(ev, support, counts, sums, h)
    hh, tries = h, 0
    while not ok.all():
        if tries == 0 and warn:
            warnings.warn(
                f"bandwidth {h:.3g} leaves {int((~ok).sum())} evaluation points without "
                "enough kernel mass; widening locally",
                stacklevel=3,
            )
        hh *= 1.5
        tries += 1
        if tries > 40:
            raise NumericFailure("local linear smoother failed even with widened bandwidth")
        bad = ~ok
        f2, ok2 = _ll1d_once(ev[bad], support, counts, sums, hh)
        fit[bad] = f2
        ok[bad] = ok2
    return fit


def _ll2d_once(ev, support, n_mat, r_mat, h):
    a0, a1, a2 = _kernel_factors(ev, support, h)
    s00 = a0 @ n_mat @ a0.T
    s10 = a1 @ n_mat @ a0.T
    s01 = a0 @ n_mat @ a1.T
    s20 = a2 @ n_mat @ a0.T
    s02 = a0 @ n_mat @ a2.T
    s11 = a1 @ n_mat @ a1.T
    r0 = a0 @ r_mat @ a0.T
    r1 = a1 @ r_mat @ a0.T
    r2 = a0 @ r_mat @ a1.T
    e = ev.size
    m = np.empty((e, e, 3, 3))
    m[..., 0, 0] = s00
    m[..., 0, 1] = m[..., 1, 0] = s10
    m[..., 0, 2] = m[..., 2, 0] = s01
    m[..., 1, 1] = s20
    m[..., 2, 2] = s02
    m[..., 1, 2] = m[..., 2, 1] = s11
    rhs = np.stack([r0, r1, r2], axis=-1)
    # scale-free conditioning test on the moment matrix
    scale = np.sqrt(np.maximum(np.diagonal(m, axis1=-2, axis2=-1), 1e-300))
    mn = m / (scale[..., :, None] * scale[..., None, :])
    det = np.linalg.det(mn)
    ok = (s00 > 0) & (det > 1e-8)
    m[~ok] = np.eye(3)
    sol = np.linalg.solve(m, rhs[..., None])[..., 0]
    return sol[..., 0], ok


def local_linear_2d(ev, support, n_mat, r_mat, h: float, warn: bool = True) -> np.ndarray:
    """Local linear surface at ``ev x ev`` from count/sum matrices on ``support x support``."""
    ev = np.asarray(ev, dtype=float)
    fit, ok = _ll2d_once(ev, support, n_mat, r_mat, h)
    hh, tries = h, 0
    while not ok.all():
        if tries == 0 and warn:
            warnings.warn(
                f"covariance bandwidth {h:.3g} too small at {int((~ok).sum())} cells; widening locally",
                stacklevel=3,
            )
        hh *= 1.5
        tries += 1
        if tries > 40:
            raise NumericFailure("surface smoother failed even with widened bandwidth")
        f2, ok2 = _ll2d_once(ev, support, n_mat, r_mat, hh)
        upd = ~ok & ok2
        fit[upd] = f2[upd]
        ok |= ok2
    return fit


# --- model types ------------------------------------------------------------


@dataclass(frozen=True)
class MeanEstimate:
    values: np.ndarray
    bandwidth: float
    grid: Grid

    def at(self, t) -> np.ndarray:
        return np.interp(t, self.grid.points, self.values)


@dataclass(frozen=True)
class CovSurface:
    surface: np.ndarray
    noise_var: float
    bandwidth: float
    grid: Grid


@dataclass(frozen=True)
class EigenSystem:
    eigenfunctions: np.ndarray  # (J, m)
    eigenvalues: np.ndarray
    mean: MeanEstimate
    noise_var: float
    fve: float
    grid: Grid

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    def phi_at(self, t) -> np.ndarray:
        """Eigenfunctions at times ``t``, shape ``(J, len(t))``."""
        g = self.grid.points
        return np.stack([np.interp(t, g, v) for v in self.eigenfunctions])

    def reconstruct(self, scores) -> np.ndarray:
        return self.mean.values + np.asarray(scores) @ self.eigenfunctions


@dataclass
class PaceOptions:
    bw_mean: Optional[float] = None
    bw_cov: Optional[float] = None
    fve_threshold: float = 0.95
    max_components: int = 20
    n_folds: int = 5
    bandwidth_fractions: Sequence[float] = BANDWIDTH_FRACTIONS
    seed: int = 0


@dataclass(frozen=True)
class PaceFit:
    eigen: EigenSystem
    cov: CovSurface
    scores: np.ndarray
    fitted: np.ndarray = field(repr=False)


# --- estimation -------------------------------------------------------------


def _folds(n: int, k: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    f = np.arange(n) % k
    rng.shuffle(f)
    return f


def _support_index(ds: SparseFunctionalDataset):
    t, _ = ds.pooled()
    support, inv = np.unique(t, return_inverse=True)
    return support, inv


def estimate_mean(
    ds: SparseFunctionalDataset,
    grid: Grid,
    bandwidth: Optional[float] = None,
    n_folds: int = 5,
    fractions: Sequence[float] = BANDWIDTH_FRACTIONS,
    seed=0,
) -> MeanEstimate:
    t, x = ds.pooled()
    if t.size < 10:
        raise InsufficientData(f"mean estimation needs >= 10 pooled observations, got {t.size}")
    support, inv = np.unique(t, return_inverse=True)
    u = support.size
    counts = np.bincount(inv, minlength=u).astype(float)
    sums = np.bincount(inv, weights=x, minlength=u)
    width = grid.points[-1] - grid.points[0]
    if bandwidth is None:
        curve_of = np.repeat(np.arange(ds.n), [len(c) for c in ds.curves])
        fold = _folds(ds.n, min(n_folds, ds.n), seed)[curve_of]
        best = (np.inf, None)
        for frac in fractions:
            h = frac * width
            err = 0.0
            for f in np.unique(fold):
                sel = fold == f
                c_f = np.bincount(inv[sel], minlength=u).astype(float)
                s_f = np.bincount(inv[sel], weights=x[sel], minlength=u)
                q_f = np.bincount(inv[sel], weights=x[sel] ** 2, minlength=u)
                fit = local_linear_1d(support, support, counts - c_f, sums - s_f, h, warn=False)
                err += float(np.sum(q_f - 2 * fit * s_f + fit**2 * c_f))
            if err < best[0]:
                best = (err, h)
        bandwidth = best[1]
    values = local_linear_1d(grid.points, support, counts, sums, bandwidth)
    return MeanEstimate(values, float(bandwidth), grid)


def _raw_cov_parts(ds: SparseFunctionalDataset, mean: MeanEstimate, support, inv):
    """Per-curve contributions to off-diagonal count/sum/sumsq matrices and
    to the diagonal (same-point) products."""
    u = support.size
    starts = np.cumsum([0] + [len(c) for c in ds.curves])
    resid = np.concatenate([c.values - mean.at(c.times) for c in ds.curves])
    parts = []
    for i in range(ds.n):
        idx = inv[starts[i] : starts[i + 1]]
        r = resid[starts[i] : starts[i + 1]]
        parts.append((idx, r))
    return parts, u


def _accumulate(parts, u, which):
    n_mat = np.zeros((u, u))
    r_mat = np.zeros((u, u))
    q_mat = np.zeros((u, u))
    d_cnt = np.zeros(u)
    d_sum = np.zeros(u)
    for i in which:
        idx, r = parts[i]
        if idx.size == 0:
            continue
        prod = np.outer(r, r)
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        np.add.at(n_mat, (ii, jj), 1.0)
        np.add.at(r_mat, (ii, jj), prod)
        np.add.at(q_mat, (ii, jj), prod * prod)
        np.add.at(d_cnt, idx, 1.0)
        np.add.at(d_sum, idx, r * r)
    # same-point products go to the diagonal smoother only
    diag = np.arange(u)
    n_mat[diag, diag] = 0.0
    r_mat[diag, diag] = 0.0
    q_mat[diag, diag] = 0.0
    return n_mat, r_mat, q_mat, d_cnt, d_sum


def estimate_cov(
    ds: SparseFunctionalDataset,
    mean: MeanEstimate,
    grid: Grid,
    bandwidth: Optional[float] = None,
    n_folds: int = 5,
    fractions: Sequence[float] = BANDWIDTH_FRACTIONS,
    seed=0,
) -> CovSurface:
    """Smoothed covariance surface and measurement-noise variance.

    The noise variance is the average gap between the smoothed same-point
    products and the surface diagonal over the middle half of the domain.
    """
    if not any(len(c) >= 2 for c in ds.curves):
        raise InsufficientData("covariance estimation needs a curve with >= 2 observations")
    support, inv = _support_index(ds)
    parts, u = _raw_cov_parts(ds, mean, support, inv)
    n_all, r_all, _, d_cnt, d_sum = _accumulate(parts, u, range(ds.n))
    width = grid.points[-1] - grid.points[0]
    if bandwidth is None:
        fold = _folds(ds.n, min(n_folds, ds.n), seed)
        fold_parts = [_accumulate(parts, u, np.flatnonzero(fold == f)) for f in np.unique(fold)]
        best = (np.inf, None)
        for frac in fractions:
            h = frac * width
            err = 0.0
            for n_f, r_f, q_f, _, _ in fold_parts:
                fit = local_linear_2d(support, support, n_all - n_f, r_all - r_f, h, warn=False)
                err += float(np.sum(q_f - 2 * fit * r_f + fit**2 * n_f))
            if err < best[0]:
                best = (err, h)
        bandwidth = best[1]
    surface = local_linear_2d(grid.points, support, n_all, r_all, bandwidth)
    surface = 0.5 * (surface + surface.T)
    diag_smooth = local_linear_1d(grid.points, support, d_cnt, d_sum, bandwidth)
    g = grid.points
    lo, hi = g[0] + 0.25 * width, g[0] + 0.75 * width
    mid = (g >= lo - 1e-12) & (g <= hi + 1e-12)
    noise = float(np.mean(diag_smooth[mid] - np.diag(surface)[mid]))
    return CovSurface(surface, max(noise, 0.0), float(bandwidth), grid)


def eigen_decompose(
    cov: CovSurface,
    grid: Grid,
    fve_threshold: float = 0.95,
    mean: Optional[MeanEstimate] = None,
    max_components: int = 20,
) -> EigenSystem:
    """Eigenfunctions of the covariance operator under trapezoid quadrature."""
    w = grid.weights
    sw = np.sqrt(w)
    a = sw[:, None] * cov.surface * sw[None, :]
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    pos = vals > 0
    if not pos.any():
        raise NumericFailure("covariance surface has no positive eigenvalues")
    vals, vecs = vals[pos], vecs[:, pos]
    frac = np.cumsum(vals) / vals.sum()
    cap = max(1, min(max_components, grid.m - 1, vals.size))
    j = int(np.searchsorted(frac, fve_threshold - 1e-12) + 1)
    j = max(1, min(j, cap))
    phi = (vecs[:, :j] / sw[:, None]).T
    # deterministic sign: largest-magnitude entry positive
    big = np.argmax(np.abs(phi), axis=1)
    phi *= np.sign(phi[np.arange(j), big])[:, None]
    if mean is None:
        mean = MeanEstimate(np.zeros(grid.m), float("nan"), grid)
    return EigenSystem(phi, vals[:j].copy(), mean, cov.noise_var, float(frac[j - 1]), grid)


def pace_scores(curve: SparseCurve, es: EigenSystem) -> np.ndarray:
    """Conditional expectation of the scores given one curve's observations."""
    phi = es.phi_at(curve.times)
    lam = es.eigenvalues
    resid = curve.values - es.mean.at(curve.times)
    sig2 = max(es.noise_var, NOISE_FLOOR)
    sy = phi.T @ (lam[:, None] * phi) + sig2 * np.eye(curve.times.size)
    jitter = 0.0
    for _ in range(8):
        try:
            fac = cho_factor(sy + jitter * np.eye(sy.shape[0]), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10, 1e-10 * max(np.trace(sy), 1.0))
    else:
        raise NumericFailure("observation covariance is singular")
    return lam * (phi @ cho_solve(fac, resid))


def fit_pace(ds: SparseFunctionalDataset, grid: Grid, opts: Optional[PaceOptions] = None) -> PaceFit:
    opts = opts or PaceOptions()
    mean = estimate_mean(ds, grid, opts.bw_mean, opts.n_folds, opts.bandwidth_fractions, opts.seed)
    if not any(len(c) >= 2 for c in ds.curves):
        # no within-curve pairs: the covariance is unidentified, fall back to the mean
        warnings.warn("no curve has two observations; PACE reconstructs with the mean only")
        es = EigenSystem(np.zeros((0, grid.m)), np.zeros(0), mean, 0.0, 0.0, grid)
        cov = CovSurface(np.zeros((grid.m, grid.m)), 0.0, float("nan"), grid)
        scores = np.zeros((ds.n, 0))
        return PaceFit(es, cov, scores, np.tile(mean.values, (ds.n, 1)))
    cov = estimate_cov(ds, mean, grid, opts.bw_cov, opts.n_folds, opts.bandwidth_fractions, opts.seed)
    es = eigen_decompose(cov, grid, opts.fve_threshold, mean, opts.max_components)
    scores = np.array([pace_scores(c, es) for c in ds.curves])
    return PaceFit(es, cov, scores, es.reconstruct(scores))


def pace_impute(ds, grid: Grid, opts: Optional[PaceOptions] = None) -> np.ndarray:
    """Dense PACE reconstruction of every curve on ``grid``.

    ``ds`` may also be an ``IncompleteMatrix`` on ``grid``.
    """
    if isinstance(ds, IncompleteMatrix):
        if not ds.grid.same_as(grid):
            raise InvalidArgument("matrix grid differs from the requested grid")
        ds = ds.to_dataset()
    return fit_pace(ds, grid, opts).fitted
