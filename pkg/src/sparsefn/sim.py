"""Synthetic sparse functional data: Matérn GP curves, noise, MCAR masks and responses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument, NumericFailure
from .funcdata import Grid, IncompleteMatrix, SparseFunctionalDataset

SUPPORTED_NU = (0.5, 1.5, 2.5)


def rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class MaternParams:
    rho: float = 0.5
    nu: float = 2.5
    sigma2: float = 1.0

    def __post_init__(self):
        if self.rho <= 0 or self.sigma2 <= 0:
            raise InvalidArgument("Matérn rho and sigma2 must be positive")
        if not any(abs(self.nu - v) < 1e-12 for v in SUPPORTED_NU):
            raise InvalidArgument(f"nu must be one of {SUPPORTED_NU}, got {self.nu}")


@dataclass(frozen=True)
class NoiseSpec:
    sigma_delta2: float = 0.3

    def __post_init__(self):
        if self.sigma_delta2 < 0:
            raise InvalidArgument("noise variance must be nonnegative")


@dataclass(frozen=True)
class SparsitySpec:
    level: str = "medium"
    missing_fraction: Optional[float] = None
    min_obs_per_curve: int = 2

    def __post_init__(self):
        level = self.level.lower()
        if level not in ("medium", "high"):
            raise InvalidArgument(f"sparsity level must be medium or high, got {self.level!r}")
        frac = self.missing_fraction
        if frac is None:
            frac = 0.5 if level == "medium" else 0.85
        if level == "medium" and abs(frac - 0.5) > 1e-12:
            raise InvalidArgument("medium sparsity means exactly half the points are missing")
        if level == "high" and frac < 0.85:
            raise InvalidArgument("high sparsity requires a missing fraction >= 0.85")
        if not 0 < frac < 1:
            raise InvalidArgument("missing fraction must lie in (0, 1)")
        if self.min_obs_per_curve < 1:
            raise InvalidArgument("min_obs_per_curve must be >= 1")
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "missing_fraction", float(frac))

    def n_missing(self, m: int) -> int:
        return int(math.floor(self.missing_fraction * m + 0.5))


RESPONSE_KINDS = ("linear-scalar", "linear-binary", "additive-scalar", "additive-binary")
ADDITIVE_F = {
    "sin-square": lambda x, t: 5.0 * np.sin(x**2 * t**2),
    "cos-cube": lambda x, t: np.cos(x**3 * t) + 5.0 * t,
}


@dataclass(frozen=True)
class ResponseSpec:
    kind: str = "linear-scalar"
    w: float = 1.0
    alpha: float = 0.0
    sigma_eps2: float = 1.0
    f_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in RESPONSE_KINDS:
            raise InvalidArgument(f"unknown response kind {self.kind!r}")
        if self.sigma_eps2 < 0:
            raise InvalidArgument("response noise variance must be nonnegative")
        if self.additive:
            if self.f_id is None:
                object.__setattr__(self, "f_id", "sin-square")
            elif self.f_id not in ADDITIVE_F:
                raise InvalidArgument(f"unknown additive function {self.f_id!r}")
        elif self.f_id is not None:
            raise InvalidArgument("f_id only applies to additive responses")

    @property
    def additive(self) -> bool:
        return self.kind.startswith("additive")

    @property
    def binary(self) -> bool:
        return self.kind.endswith("binary")

    def beta(self, grid: Grid):
        if self.additive:
            return None
        return self.w * np.sin(2 * np.pi * grid.points)


def matern_cov(t, s, p: MaternParams = MaternParams()):
    """Matérn covariance for half-integer smoothness (closed forms)."""
    d = np.abs(np.asarray(t, dtype=float) - np.asarray(s, dtype=float))
    if abs(p.nu - 0.5) < 1e-12:
        out = np.exp(-d / p.rho)
    elif abs(p.nu - 1.5) < 1e-12:
        r = math.sqrt(3.0) * d / p.rho
        out = (1.0 + r) * np.exp(-r)
    elif abs(p.nu - 2.5) < 1e-12:
        r = math.sqrt(5.0) * d / p.rho
        out = (1.0 + r + r**2 / 3.0) * np.exp(-r)
    else:
        raise InvalidArgument(f"unsupported nu={p.nu}")
    return p.sigma2 * out


def matern_matrix(grid: Grid, p: MaternParams) -> np.ndarray:
    g = grid.points
    return matern_cov(g[:, None], g[None, :], p)


def _jittered_cholesky(c: np.ndarray) -> np.ndarray:
    jitter = 1e-10
    eye = np.eye(c.shape[0])
    while jitter <= 1e-6 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(c + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
    raise NumericFailure("covariance not positive definite even with jitter 1e-6")


def sample_gp(n: int, grid: Grid, p: MaternParams, seed=None) -> np.ndarray:
    """``n`` iid zero-mean GP draws evaluated on ``grid`` (one per row)."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    L = _jittered_cholesky(matern_matrix(grid, p))
    z = rng_from(seed).standard_normal((n, grid.m))
    return z @ L.T


def add_noise(curves, spec: NoiseSpec, seed=None) -> np.ndarray:
    curves = np.asarray(curves, dtype=float)
    if spec.sigma_delta2 == 0:
        return curves.copy()
    eps = rng_from(seed).standard_normal(curves.shape)
    return curves + math.sqrt(spec.sigma_delta2) * eps


def sparsify(curves, grid: Grid, spec: SparsitySpec, seed=None) -> IncompleteMatrix:
    """Mask exactly ``round(missing_fraction * m)`` uniformly chosen points per row."""
    curves = np.asarray(curves, dtype=float)
    n, m = curves.shape
    n_mis = spec.n_missing(m)
    if m - n_mis < max(spec.min_obs_per_curve, 1):
        raise InvalidArgument(
            f"masking {n_mis} of {m} points leaves fewer than {spec.min_obs_per_curve} observations"
        )
    rng = rng_from(seed)
    # rank of iid uniforms gives a uniformly random subset per row
    keys = rng.random((n, m))
    order = np.argsort(keys, axis=1)
    mask = np.ones((n, m), dtype=bool)
    np.put_along_axis(mask, order[:, :n_mis], False, axis=1)
    return IncompleteMatrix(np.where(mask, curves, np.nan), mask, grid)


def linear_predictor(truth, grid: Grid, spec: ResponseSpec) -> np.ndarray:
    """Noise-free signal: ``alpha + int beta X`` or ``int f(X(t), t) dt``."""
    truth = np.asarray(truth, dtype=float)
    if spec.additive:
        f = ADDITIVE_F[spec.f_id]
        return grid.integrate(f(truth, grid.points[None, :]))
    return spec.alpha + grid.integrate(truth * spec.beta(grid)[None, :])


def gen_response(truth, grid: Grid, spec: ResponseSpec, seed=None) -> np.ndarray:
    eta = linear_predictor(truth, grid, spec)
    rng = rng_from(seed)
    if spec.binary:
        return (rng.random(eta.shape) < expit(eta)).astype(float)
    if spec.sigma_eps2 == 0:
        return eta
    return eta + math.sqrt(spec.sigma_eps2) * rng.standard_normal(eta.shape)


@dataclass(frozen=True)
class GeneratedDataset:
    truth: np.ndarray
    noisy: np.ndarray
    observed: SparseFunctionalDataset
    matrix: IncompleteMatrix
    response: np.ndarray
    signal: np.ndarray
    beta_true: Optional[np.ndarray]
    grid: Grid
    seed: int

    @property
    def mask(self) -> np.ndarray:
        return self.matrix.mask


def generate(
    n: int,
    grid: Grid,
    sparsity: SparsitySpec,
    response: ResponseSpec,
    matern: MaternParams = MaternParams(),
    noise: NoiseSpec = NoiseSpec(),
    seed: int = 0,
) -> GeneratedDataset:
    """Draw curves, add noise, mask, and attach a response.

    Stage streams are spawned from ``seed`` so changing one stage's settings
    never shifts the random numbers of another.
    """
    s_gp, s_noise, s_mask, s_resp = np.random.SeedSequence(seed).spawn(4)
    truth = sample_gp(n, grid, matern, np.random.default_rng(s_gp))
    noisy = add_noise(truth, noise, np.random.default_rng(s_noise))
    mat = sparsify(noisy, grid, sparsity, np.random.default_rng(s_mask))
    y = gen_response(truth, grid, response, np.random.default_rng(s_resp))
    signal = linear_predictor(truth, grid, response)
    ds = mat.to_dataset(response=y)
    return GeneratedDataset(
        truth=truth,
        noisy=noisy,
        observed=ds,
        matrix=mat,
        response=y,
        signal=signal,
        beta_true=response.beta(grid),
        grid=grid,
        seed=int(seed),
    )
