"""B-spline bases and natural cubic interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline, CubicSpline

from .errors import InvalidArgument


@dataclass(frozen=True)
class SplineBasis:
    """A B-spline basis on ``[knots[0], knots[-1]]``.

    ``knots`` holds the distinct breakpoints (boundary knots included, no
    repeats); the full knot vector repeats each boundary ``degree + 1`` times.
    """

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise InvalidArgument("knots must be a strictly increasing vector of length >= 2")
        if self.degree < 0:
            raise InvalidArgument("degree must be nonnegative")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @classmethod
    def equally_spaced(cls, n_basis: int, degree: int = 3, lo: float = 0.0, hi: float = 1.0):
        n_interior = n_basis - degree - 1
        if n_interior < 0:
            raise InvalidArgument(f"n_basis={n_basis} too small for degree {degree}")
        return cls(degree, np.linspace(lo, hi, n_interior + 2))

    @property
    def n_basis(self) -> int:
        return self.knots.size - 2 + self.degree + 1

    @property
    def lo(self) -> float:
        return float(self.knots[0])

    @property
    def hi(self) -> float:
        return float(self.knots[-1])

    @property
    def full_knots(self) -> np.ndarray:
        k = self.degree
        return np.concatenate([np.repeat(self.knots[0], k), self.knots, np.repeat(self.knots[-1], k)])

    def _inside(self, x: np.ndarray, nu: int = 0) -> np.ndarray:
        # x is assumed clipped to [lo, hi]
        if nu > self.degree:
            return np.zeros((x.size, self.n_basis))
        if self.degree == 0 and self.n_basis == 1:
            return np.ones((x.size, 1))
        spl = BSpline(self.full_knots, np.eye(self.n_basis), self.degree)
        if nu:
            spl = spl.derivative(nu)
        return spl(x)

    def evaluate(self, x, nu: int = 0, extrapolate: str = "linear") -> np.ndarray:
        """Evaluate the basis (or its ``nu``-th derivative) at ``x``.

        Returns an ``(len(x), n_basis)`` matrix. Outside ``[lo, hi]`` the
        basis is continued linearly from the boundary (``extrapolate="linear"``)
        or set to zero (``extrapolate="zero"``).
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xc = np.clip(x, self.lo, self.hi)
        out = self._inside(xc, nu)
        below, above = x < self.lo, x > self.hi
        if not (below.any() or above.any()):
            return out
        if extrapolate == "zero":
            out[below | above] = 0.0
            return out
        if extrapolate != "linear":
            raise InvalidArgument(f"unknown extrapolation mode {extrapolate!r}")
        if nu >= 2:
            out[below | above] = 0.0
            return out
        edges = np.array([self.lo, self.hi])
        val = self._inside(edges, 0)
        der = self._inside(edges, 1)
        for side, sel in ((0, below), (1, above)):
            if not sel.any():
                continue
            if nu == 0:
                out[sel] = val[side] + (x[sel] - edges[side])[:, None] * der[side]
            else:
                out[sel] = der[side]
        return out

    def penalty_matrix(self, order: int = 2) -> np.ndarray:
        """Gram matrix of the ``order``-th derivatives, integrated exactly."""
        if order > self.degree:
            return np.zeros((self.n_basis, self.n_basis))
        npts = max(self.degree - order + 1, 1)
        gx, gw = np.polynomial.legendre.leggauss(npts)
        a, b = self.knots[:-1], self.knots[1:]
        half = (b - a) / 2
        x = ((a + b) / 2)[:, None] + half[:, None] * gx[None, :]
        w = half[:, None] * gw[None, :]
        d = self._inside(x.ravel(), order)
        return d.T @ (w.ravel()[:, None] * d)


def natural_cubic_interpolate(x, y, x_new) -> np.ndarray:
    """Interpolate ``y`` (values along the last axis) at ``x_new``.

    Uses a natural cubic spline for four or more nodes and the unique
    interpolating polynomial of degree ``len(x) - 1`` otherwise.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x_new = np.asarray(x_new, dtype=float)
    k = x.size
    if k >= 4:
        return CubicSpline(x, y, axis=-1, bc_type="natural")(x_new)
    if k == 1:
        return np.broadcast_to(y[..., :1], y.shape[:-1] + x_new.shape).copy()
    # Lagrange form; exact for k <= 3
    out = np.zeros(y.shape[:-1] + x_new.shape)
    for j in range(k):
        lj = np.ones_like(x_new)
        for i in range(k):
            if i != j:
                lj = lj * (x_new - x[i]) / (x[j] - x[i])
        out = out + y[..., j : j + 1] * lj
    return out
