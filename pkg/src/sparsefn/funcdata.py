"""Grids, sparse curves, grid alignment and the binning scheme."""

from __future__ import annotations

import csv
import warnings
from dataclasses import InitVar, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument
from .splines import natural_cubic_interpolate


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def trapezoid_weights(points) -> np.ndarray:
    """Quadrature weights ``w`` with ``sum(w * f) ~ integral of f``."""
    points = np.asarray(points, dtype=float)
    w = np.zeros(points.size)
    d = np.diff(points)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


@dataclass(frozen=True)
class Grid:
    points: np.ndarray

    def __post_init__(self):
        p = _frozen(self.points)
        if p.ndim != 1 or p.size < 2:
            raise InvalidArgument("a grid needs at least 2 points")
        if np.any(np.diff(p) <= 0):
            raise InvalidArgument("grid points must be strictly increasing")
        object.__setattr__(self, "points", p)

    @property
    def m(self) -> int:
        return self.points.size

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.points)

    def integrate(self, values) -> np.ndarray:
        """Trapezoid integral along the last axis."""
        return np.asarray(values) @ self.weights

    def same_as(self, other: "Grid", tol: float = 1e-12) -> bool:
        return self.m == other.m and bool(np.all(np.abs(self.points - other.points) <= tol))


@dataclass(frozen=True)
class SparseCurve:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t, v = _frozen(self.times), _frozen(self.values)
        if t.ndim != 1 or t.shape != v.shape or t.size < 1:
            raise InvalidArgument("a curve needs >= 1 observation with matching times and values")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgument("observation times must be strictly increasing within a curve")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.size


@dataclass(frozen=True)
class SparseFunctionalDataset:
    curves: tuple
    response: Optional[np.ndarray] = None
    grid: Optional[Grid] = None
    ids: Optional[tuple] = None

    def __post_init__(self):
        curves = tuple(self.curves)
        if not curves:
            raise InvalidArgument("a dataset needs at least one curve")
        object.__setattr__(self, "curves", curves)
        if self.response is not None:
            r = _frozen(self.response)
            if r.shape != (len(curves),):
                raise InvalidArgument("response length must equal the number of curves")
            object.__setattr__(self, "response", r)
        if self.ids is None:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(len(curves))))
        elif len(self.ids) != len(curves):
            raise InvalidArgument("ids length must equal the number of curves")
        else:
            object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def n(self) -> int:
        return len(self.curves)

    def pooled(self) -> tuple:
        """All ``(times, values)`` pairs concatenated across curves."""
        t = np.concatenate([c.times for c in self.curves])
        v = np.concatenate([c.values for c in self.curves])
        return t, v


@dataclass(frozen=True)
class IncompleteMatrix:
    """Grid-aligned values with an explicit mask (``True`` = observed).

    Unobserved cells hold NaN so that any accidental read poisons arithmetic;
    the mask is the only authority on what is observed.
    """

    values: np.ndarray
    mask: np.ndarray
    grid: Grid
    check_rows: InitVar[bool] = True

    def __post_init__(self, check_rows):
        mask = _frozen(self.mask, bool)
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape != mask.shape:
            raise InvalidArgument("values and mask must be matrices of the same shape")
        if vals.shape[1] != self.grid.m:
            raise InvalidArgument("matrix width must equal the grid size")
        if np.any(~np.isfinite(vals[mask])):
            raise InvalidArgument("observed entries must be finite")
        if check_rows and np.any(mask.sum(axis=1) == 0):
            raise InvalidArgument("every row needs at least one observed entry")
        vals[~mask] = np.nan
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def n_missing(self) -> int:
        return int((~self.mask).sum())

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.mask, self.values, fill)

    def to_dataset(self, response=None, ids=None) -> SparseFunctionalDataset:
        g = self.grid.points
        curves = [SparseCurve(g[row], v[row]) for v, row in zip(self.values, self.mask) if row.any()]
        if len(curves) != self.shape[0]:
            raise InvalidArgument("cannot convert rows without observations to curves")
        return SparseFunctionalDataset(tuple(curves), response=response, grid=self.grid, ids=ids)


@dataclass(frozen=True)
class BinSpec:
    """Bins over a grid.

    ``assignment[j]`` is the bin index of grid point ``j`` (or -1 when the
    point belongs to no bin, which only happens for ``k = 2``).
    """

    k: int
    bin_edges: np.ndarray
    bin_centers: np.ndarray
    assignment: np.ndarray = field(repr=False)

    def members(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == b)

    @property
    def center_grid(self) -> Grid:
        return Grid(self.bin_centers)


def make_grid(m: int) -> Grid:
    if int(m) != m or m < 2:
        raise InvalidArgument(f"m must be an integer >= 2, got {m}")
    return Grid(np.linspace(0.0, 1.0, int(m)))


def align_to_grid(
    ds: SparseFunctionalDataset, grid: Grid, snap: bool = False, tol: float = 1e-9
) -> IncompleteMatrix:
    """Place each observation in its grid cell.

    Without ``snap`` every time must coincide with a grid point within ``tol``;
    with ``snap`` times go to the nearest point. Several observations landing
    in one cell are averaged (with a warning).
    """
    g = grid.points
    n, m = ds.n, grid.m
    sums = np.zeros((n, m))
    counts = np.zeros((n, m), dtype=int)
    n_dupes = 0
    for i, c in enumerate(ds.curves):
        t = c.times
        if np.any(t < g[0] - tol) or np.any(t > g[-1] + tol):
            raise InvalidArgument(f"curve {ds.ids[i]}: time outside [{g[0]}, {g[-1]}]")
        pos = np.clip(np.searchsorted(g, t), 1, m - 1)
        idx = np.where(np.abs(t - g[pos - 1]) <= np.abs(g[pos] - t), pos - 1, pos)
        if not snap:
            off = np.abs(t - g[idx]) > tol
            if off.any():
                raise InvalidArgument(
                    f"curve {ds.ids[i]}: time {t[off][0]} is not on the grid (enable snapping)"
                )
        np.add.at(sums[i], idx, c.values)
        np.add.at(counts[i], idx, 1)
        n_dupes += int((np.bincount(idx, minlength=m) > 1).sum())
    if n_dupes:
        warnings.warn(f"{n_dupes} grid cells received several observations; averaged", stacklevel=2)
    mask = counts > 0
    values = np.where(mask, sums / np.maximum(counts, 1), np.nan)
    return IncompleteMatrix(values, mask, grid)


def make_bins(grid: Grid, k: int) -> BinSpec:
    """First and last grid points are singleton bins; the interior is cut
    into ``k - 2`` equal-width intervals, half-open on the right except the
    last one.

    A middle bin sits at the mean of its member grid times, which is its
    interval midpoint whenever the members are symmetric in it (and is
    always a grid point when the bin holds a single one).
    """
    m = grid.m
    if int(k) != k or k < 2 or k > m:
        raise InvalidArgument(f"k must be an integer in [2, {m}], got {k}")
    k = int(k)
    g = grid.points
    lo, hi = g[0], g[-1]
    n_mid = k - 2
    edges = np.linspace(lo, hi, n_mid + 1) if n_mid else np.array([lo, hi])
    assignment = np.full(m, -1, dtype=int)
    assignment[0], assignment[-1] = 0, k - 1
    centers = np.empty(k)
    centers[0], centers[-1] = lo, hi
    if n_mid:
        interior = g[1:-1]
        b = np.searchsorted(edges, interior, side="right") - 1
        b = np.clip(b, 0, n_mid - 1)
        assignment[1:-1] = b + 1
        for j in range(n_mid):
            members = interior[b == j]
            mid = 0.5 * (edges[j] + edges[j + 1])
            centers[j + 1] = members.mean() if members.size else mid
    bin_edges = np.concatenate([[lo], edges, [hi]]) if n_mid else np.array([lo, lo, hi])
    return BinSpec(k, _frozen(bin_edges), _frozen(centers), _frozen(assignment, int))


def bin_matrix(x: IncompleteMatrix, bins: BinSpec) -> IncompleteMatrix:
    if bins.assignment.size != x.grid.m:
        raise InvalidArgument("bins were not built from this matrix's grid")
    vals = x.filled(0.0)
    obs = x.mask.astype(float)
    n = x.shape[0]
    sums = np.zeros((n, bins.k))
    counts = np.zeros((n, bins.k))
    for b in range(bins.k):
        cols = bins.members(b)
        sums[:, b] = vals[:, cols].sum(axis=1)
        counts[:, b] = obs[:, cols].sum(axis=1)
    mask = counts > 0
    out = np.where(mask, sums / np.maximum(counts, 1), np.nan)
    return IncompleteMatrix(out, mask, bins.center_grid, check_rows=False)


def bin_dense(values: np.ndarray, bins: BinSpec) -> np.ndarray:
    """Bin means of fully observed rows."""
    values = np.asarray(values, dtype=float)
    out = np.empty(values.shape[:-1] + (bins.k,))
    for b in range(bins.k):
        out[..., b] = values[..., bins.members(b)].mean(axis=-1)
    return out


def interpolate_row(bin_values, bins: BinSpec, grid: Grid) -> np.ndarray:
    """Interpolate completed bin values back onto ``grid``.

    Accepts a single length-k row or an ``(n, k)`` matrix.
    """
    y = np.asarray(bin_values, dtype=float)
    if y.shape[-1] != bins.k:
        raise InvalidArgument(f"expected {bins.k} bin values, got {y.shape[-1]}")
    if np.any(~np.isfinite(y)):
        raise InvalidArgument("cannot interpolate missing bin values")
    return natural_cubic_interpolate(bins.bin_centers, y, grid.points)


# --- long-format CSV -------------------------------------------------------


def read_long_csv(path) -> tuple:
    """Read ``curve_id,time,value`` rows.

    Returns ``(ids, curves)`` in first-appearance order of ids; rows of a
    curve are sorted by time. Unparseable rows raise with their line numbers.
    """
    path = Path(path)
    data: dict = {}
    bad = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["curve_id", "time", "value"]:
            raise InvalidArgument(f"{path}: header must be curve_id,time,value")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                cid, t, v = row[0].strip(), float(row[1]), float(row[2])
                if not (np.isfinite(t) and np.isfinite(v)) or not cid:
                    raise ValueError
            except (ValueError, IndexError):
                bad.append(lineno)
                continue
            data.setdefault(cid, []).append((t, v))
    if bad:
        shown = ", ".join(map(str, bad[:20]))
        raise InvalidArgument(f"{path}: unparseable rows at lines {shown}")
    ids, curves = [], []
    for cid, obs in data.items():
        obs.sort()
        t = np.array([o[0] for o in obs])
        v = np.array([o[1] for o in obs])
        # exact repeated times are merged here; grid alignment averages the rest
        ut, inv = np.unique(t, return_inverse=True)
        if ut.size != t.size:
            v = np.bincount(inv, weights=v) / np.bincount(inv)
            t = ut
        ids.append(cid)
        curves.append(SparseCurve(t, v))
    return ids, curves


def read_response_csv(path, ids: Sequence[str]) -> np.ndarray:
    path = Path(path)
    found = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["curve_id", "y"]:
            raise InvalidArgument(f"{path}: header must be curve_id,y")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                found[row[0].strip()] = float(row[1])
            except (ValueError, IndexError):
                raise InvalidArgument(f"{path}: unparseable row at line {lineno}") from None
    missing = [i for i in ids if i not in found]
    if missing:
        raise InvalidArgument(f"{path}: no response for curve id {missing[0]!r}")
    return np.array([found[i] for i in ids])


def load_dataset(curves_csv, response_csv=None) -> SparseFunctionalDataset:
    ids, curves = read_long_csv(curves_csv)
    if not curves:
        raise InvalidArgument(f"{curves_csv}: no observations")
    y = read_response_csv(response_csv, ids) if response_csv else None
    return SparseFunctionalDataset(tuple(curves), response=y, ids=tuple(ids))


def write_long_csv(path, ids: Sequence[str], times, values, mask=None) -> None:
    """Write a matrix (or a list of per-curve arrays) in long format."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id", "time", "value"])
        for i, cid in enumerate(ids):
            t = times[i] if np.ndim(times) == 2 or isinstance(times, (list, tuple)) else times
            v = values[i]
            keep = np.ones(len(v), bool) if mask is None else mask[i]
            for tj, vj in zip(np.asarray(t)[keep], np.asarray(v)[keep]):
                w.writerow([cid, repr(float(tj)), repr(float(vj))])


def write_response_csv(path, ids: Sequence[str], y) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id", "y"])
        for cid, yi in zip(ids, y):
            w.writerow([cid, repr(float(yi))])
