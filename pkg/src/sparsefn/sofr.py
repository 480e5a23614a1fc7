"""Scalar-on-function regression on dense curves.

Linear and logistic models expand the coefficient function in a cubic
B-spline basis with a second-derivative roughness penalty; the continuously
additive model uses a tensor-product spline surface ``f(x, t)``. Penalties
are chosen by generalized cross-validation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument, NumericFailure
from .funcdata import Grid
from .splines import SplineBasis

LAMBDA_GRID = tuple(np.logspace(-6, 2, 33))
CAM_LAMBDA_GRID = (1e-6, 1e-4, 1e-2, 1.0, 1e2)


@dataclass
class SofrOptions:
    n_basis: int = 15
    degree: int = 3
    lambdas: Sequence[float] = LAMBDA_GRID
    penalty_lambda: Optional[float] = None
    cam_basis: tuple = (7, 7)
    cam_lambdas: Sequence[float] = CAM_LAMBDA_GRID
    cam_lambda_pair: Optional[tuple] = None
    max_iter: int = 100
    tol: float = 1e-8


@dataclass
class FunctionalLinearModel:
    alpha_hat: float
    beta_hat: np.ndarray
    basis: SplineBasis
    penalty_lambda: float
    link: str
    coef: np.ndarray
    grid: Grid
    coef_cov: Optional[np.ndarray] = field(default=None, repr=False)
    converged: bool = True
    boundary_lambda: bool = False

    @property
    def beta_var(self) -> Optional[np.ndarray]:
        """Pointwise sampling variance of ``beta_hat`` on the grid."""
        if self.coef_cov is None:
            return None
        B = self.basis.evaluate(self.grid.points)
        return np.einsum("ij,jk,ik->i", B, self.coef_cov[1:, 1:], B)

    def to_dict(self) -> dict:
        return {
            "model": "logistic" if self.link == "logit" else "linear",
            "link": self.link,
            "grid": self.grid.points.tolist(),
            "basis": {"degree": self.basis.degree, "knots": self.basis.knots.tolist()},
            "penalty_lambda": self.penalty_lambda,
            "alpha_hat": self.alpha_hat,
            "coefficients": self.coef[1:].tolist(),
            "beta_hat": self.beta_hat.tolist(),
            "converged": self.converged,
        }


@dataclass
class CamModel:
    coeff: np.ndarray  # (J_x, J_t)
    x_basis: SplineBasis
    t_basis: SplineBasis
    x_range: tuple
    penalty_lambdas: tuple
    grid: Grid
    link: str = "identity"
    converged: bool = True
    boundary_lambda: bool = False

    def surface(self, x, t) -> np.ndarray:
        """Evaluate ``f(x, t)`` elementwise on broadcast arrays."""
        x, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(t, float))
        bx = self.x_basis.evaluate(x.ravel())
        bt = self.t_basis.evaluate(t.ravel())
        return np.einsum("ij,jk,ik->i", bx, self.coeff, bt).reshape(x.shape)

    def to_dict(self) -> dict:
        return {
            "model": "cam",
            "link": self.link,
            "grid": self.grid.points.tolist(),
            "x_basis": {"degree": self.x_basis.degree, "knots": self.x_basis.knots.tolist()},
            "t_basis": {"degree": self.t_basis.degree, "knots": self.t_basis.knots.tolist()},
            "x_range": list(self.x_range),
            "penalty_lambdas": list(self.penalty_lambdas),
            "coefficients": self.coeff.tolist(),
            "converged": self.converged,
        }


# --- shared penalized solver -------------------------------------------------


def _check_inputs(curves, y, grid: Grid):
    curves = np.asarray(curves, dtype=float)
    y = np.asarray(y, dtype=float)
    if curves.ndim != 2 or curves.shape[1] != grid.m:
        raise InvalidArgument("curves must be an (n, m) matrix on the grid")
    if y.shape != (curves.shape[0],):
        raise InvalidArgument("response length must equal the number of curves")
    if not (np.isfinite(curves).all() and np.isfinite(y).all()):
        raise InvalidArgument("curves and response must be fully observed")
    return curves, y


def _solve(A, b):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e13:
        raise NumericFailure("penalized normal equations are numerically singular")
    return np.linalg.solve(A, b)


@dataclass
class _Fit:
    theta: np.ndarray
    edf: float
    score: float
    converged: bool
    cov: np.ndarray
    dispersion: float


def _fit_gaussian(D, y, P):
    n = D.shape[0]
    DtD = D.T @ D
    A = DtD + P
    theta = _solve(A, D.T @ y)
    hinv = np.linalg.inv(A)
    edf = float(np.trace(hinv @ DtD))
    rss = float(np.sum((y - D @ theta) ** 2))
    denom = max(n - edf, 1e-8)
    score = n * rss / denom**2
    disp = rss / denom
    cov = disp * hinv @ DtD @ hinv
    return _Fit(theta, edf, score, True, cov, disp)


def _deviance(y, mu):
    mu = np.clip(mu, 1e-15, 1 - 1e-15)
    return float(-2 * np.sum(y * np.log(mu) + (1 - y) * np.log(1 - mu)))


def _fit_logistic(D, y, P, max_iter=100, tol=1e-8, theta0=None):
    n = D.shape[0]
    theta = np.zeros(D.shape[1]) if theta0 is None else theta0.copy()
    eta = D @ theta
    mu = expit(eta)
    dev = _deviance(y, mu)
    converged = False
    for it in range(max_iter):
        w = np.clip(mu * (1 - mu), 1e-10, None)
        z = eta + (y - mu) / w
        DtW = D.T * w
        A = DtW @ D + P
        try:
            step = _solve(A, DtW @ z)
        except NumericFailure:
            # weights collapse under separation; keep the last iterate
            if it == 0:
                raise
            break
        theta = step
        eta = D @ theta
        mu = expit(eta)
        new = _deviance(y, mu)
        if abs(new - dev) < tol * (abs(new) + 0.1) or abs(new - dev) < tol:
            dev = new
            converged = True
            break
        dev = new
    w = np.clip(mu * (1 - mu), 1e-10, None)
    DtWD = (D.T * w) @ D
    hinv = np.linalg.pinv(DtWD + P)
    edf = float(np.trace(hinv @ DtWD))
    denom = max(n - edf, 1e-8)
    score = n * dev / denom**2
    cov = hinv @ DtWD @ hinv
    return _Fit(theta, edf, score, converged, cov, 1.0)


def _penalty_scale(D, P) -> float:
    # puts unitless difference penalties on the scale of D'D
    tp = np.trace(P)
    return float(np.trace(D.T @ D) / tp) if tp > 0 else 1.0


def _select(D, y, penalties, link, opts: SofrOptions):
    """Fit every candidate penalty matrix, return the GCV-best fit and index."""
    best, best_i, fits = None, -1, []
    theta0 = None
    for i, P in enumerate(penalties):
        try:
            if link == "logit":
                fit = _fit_logistic(D, y, P, opts.max_iter, opts.tol, theta0)
                theta0 = fit.theta
            else:
                fit = _fit_gaussian(D, y, P)
        except NumericFailure:
            fits.append(None)
            continue
        fits.append(fit)
        if best is None or fit.score < best.score:
            best, best_i = fit, i
    if best is None:
        raise NumericFailure("no candidate penalty gave a well-posed fit")
    return best, best_i


# --- linear / logistic ------------------------------------------------------


def _linear_design(curves, grid: Grid, basis: SplineBasis):
    B = basis.evaluate(grid.points)
    Z = curves @ (grid.weights[:, None] * B)
    return np.hstack([np.ones((curves.shape[0], 1)), Z]), B


def _fit_flm(curves, y, grid, opts, link):
    opts = opts or SofrOptions()
    curves, y = _check_inputs(curves, y, grid)
    basis = SplineBasis.equally_spaced(opts.n_basis, opts.degree)
    if curves.shape[0] <= basis.n_basis:
        raise InvalidArgument(f"need more curves ({curves.shape[0]}) than basis functions ({basis.n_basis})")
    D, B = _linear_design(curves, grid, basis)
    P = np.zeros((D.shape[1], D.shape[1]))
    P[1:, 1:] = basis.penalty_matrix(2)
    lambdas = [opts.penalty_lambda] if opts.penalty_lambda is not None else list(opts.lambdas)
    # objective: RSS (or deviance) + lambda * int beta''(t)^2 dt
    fit, i = _select(D, y, [lam * P for lam in lambdas], link, opts)
    boundary = len(lambdas) > 1 and i in (0, len(lambdas) - 1)
    if boundary:
        warnings.warn(f"GCV selected the boundary penalty {lambdas[i]:g}", stacklevel=3)
    if not fit.converged:
        warnings.warn("IRLS hit the iteration cap (possible separation)", stacklevel=3)
    c = fit.theta
    return FunctionalLinearModel(
        alpha_hat=float(c[0]),
        beta_hat=B @ c[1:],
        basis=basis,
        penalty_lambda=float(lambdas[i]),
        link=link,
        coef=c,
        grid=grid,
        coef_cov=fit.cov,
        converged=fit.converged,
        boundary_lambda=boundary,
    )


def fit_linear_sofr(curves, y, grid: Grid, opts: Optional[SofrOptions] = None) -> FunctionalLinearModel:
    return _fit_flm(curves, y, grid, opts, "identity")


def fit_logistic_sofr(curves, y, grid: Grid, opts: Optional[SofrOptions] = None) -> FunctionalLinearModel:
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgument("logistic responses must be 0/1")
    if y.min() == y.max():
        raise InvalidArgument("logistic fit needs both classes present")
    return _fit_flm(curves, y, grid, opts, "logit")


# --- continuously additive model ----------------------------------------------


def _second_diff_penalty(k: int) -> np.ndarray:
    if k < 3:
        return np.zeros((k, k))
    d = np.diff(np.eye(k), n=2, axis=0)
    return d.T @ d


def _cam_design(curves, grid: Grid, xb: SplineBasis, tb: SplineBasis):
    n, m = curves.shape
    bx = xb.evaluate(curves.ravel()).reshape(n, m, xb.n_basis)
    bt = tb.evaluate(grid.points)
    return np.einsum("itj,tk,t->ijk", bx, bt, grid.weights).reshape(n, -1)


def fit_cam(curves, y, grid: Grid, opts: Optional[SofrOptions] = None, binary: Optional[bool] = None) -> CamModel:
    """Continuously additive model ``Y = int f(X(t), t) dt``.

    ``opts.cam_basis[0] == 1`` gives an x-basis of one constant function.
    Binary 0/1 responses (auto-detected unless ``binary`` is given) use a
    logit link.
    """
    opts = opts or SofrOptions()
    curves, y = _check_inputs(curves, y, grid)
    if binary is None:
        binary = bool(np.all((y == 0) | (y == 1)))
    link = "logit" if binary else "identity"
    if binary and y.min() == y.max():
        raise InvalidArgument("binary fit needs both classes present")
    jx, jt = opts.cam_basis
    lo, hi = np.percentile(curves, [1, 99])
    if hi <= lo:
        hi = lo + 1.0
    xb = SplineBasis(0, [lo, hi]) if jx == 1 else SplineBasis.equally_spaced(jx, 3, lo, hi)
    tb = SplineBasis.equally_spaced(jt, 3, 0.0, 1.0)
    D = _cam_design(curves, grid, xb, tb)
    if D.shape[0] <= D.shape[1] // 4:
        raise InvalidArgument("too few curves for the tensor basis")
    px = np.kron(_second_diff_penalty(xb.n_basis), np.eye(tb.n_basis))
    pt = np.kron(np.eye(xb.n_basis), _second_diff_penalty(tb.n_basis))
    sx = _penalty_scale(D, px) if np.trace(px) > 0 else 0.0
    st = _penalty_scale(D, pt)
    if opts.cam_lambda_pair is not None:
        pairs = [tuple(opts.cam_lambda_pair)]
    else:
        grid_l = list(opts.cam_lambdas)
        pairs = [(a, b) for a in grid_l for b in grid_l] if sx > 0 else [(grid_l[0], b) for b in grid_l]
    # f(x, t) = t - 1/2 integrates to zero for every curve, so a small ridge
    # keeps that unpenalized direction identified
    ridge = 1e-8 * np.trace(D.T @ D) / D.shape[1] * np.eye(D.shape[1])
    penalties = [a * sx * px + b * st * pt + ridge for a, b in pairs]
    fit, i = _select(D, y, penalties, link, opts)
    lam = pairs[i]
    grid_l = list(opts.cam_lambdas)
    boundary = len(pairs) > 1 and any(l in (grid_l[0], grid_l[-1]) for l in lam)
    if not fit.converged:
        warnings.warn("IRLS hit the iteration cap (possible separation)", stacklevel=2)
    return CamModel(
        coeff=fit.theta.reshape(xb.n_basis, tb.n_basis),
        x_basis=xb,
        t_basis=tb,
        x_range=(float(lo), float(hi)),
        penalty_lambdas=(float(lam[0]), float(lam[1])),
        grid=grid,
        link=link,
        converged=fit.converged,
        boundary_lambda=boundary,
    )


# --- prediction and serialization -------------------------------------------


def predict(model, curves, grid: Grid, labels: bool = False) -> np.ndarray:
    """Predicted means (probabilities for logit links; 0/1 at threshold 0.5
    when ``labels``)."""
    curves = np.asarray(curves, dtype=float)
    if not grid.same_as(model.grid) or curves.ndim != 2 or curves.shape[1] != grid.m:
        raise InvalidArgument("curves must lie on the grid the model was fitted on")
    if isinstance(model, FunctionalLinearModel):
        eta = model.alpha_hat + grid.integrate(curves * model.beta_hat[None, :])
    elif isinstance(model, CamModel):
        D = _cam_design(curves, grid, model.x_basis, model.t_basis)
        eta = D @ model.coeff.ravel()
    else:
        raise InvalidArgument(f"unsupported model type {type(model).__name__}")
    if model.link == "logit":
        prob = expit(eta)
        return (prob >= 0.5).astype(float) if labels else prob
    return eta


def _basis_from(d) -> SplineBasis:
    return SplineBasis(int(d["degree"]), np.asarray(d["knots"], float))


def model_from_dict(d: dict):
    grid = Grid(np.asarray(d["grid"], float))
    if d["model"] == "cam":
        return CamModel(
            coeff=np.asarray(d["coefficients"], float),
            x_basis=_basis_from(d["x_basis"]),
            t_basis=_basis_from(d["t_basis"]),
            x_range=tuple(d["x_range"]),
            penalty_lambdas=tuple(d["penalty_lambdas"]),
            grid=grid,
            link=d["link"],
            converged=d.get("converged", True),
        )
    basis = _basis_from(d["basis"])
    coef = np.concatenate([[d["alpha_hat"]], d["coefficients"]])
    return FunctionalLinearModel(
        alpha_hat=float(d["alpha_hat"]),
        beta_hat=basis.evaluate(grid.points) @ coef[1:],
        basis=basis,
        penalty_lambda=float(d["penalty_lambda"]),
        link=d["link"],
        coef=coef,
        grid=grid,
        converged=d.get("converged", True),
    )


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
