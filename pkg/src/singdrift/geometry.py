"""Box domains, uniform space-time grids, sampled grid functions and the
mixed-norm / Hölder functionals used throughout the package.

Conventions
-----------
Points are numpy arrays whose last axis has length ``d``.  A
:class:`GridFunction` stores values with shape
``(n_t, n_1, ..., n_d) + component_shape`` where ``component_shape`` is
``()`` for scalars, ``(d,)`` for vectors and ``(d, d)`` for matrices.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np


class GridError(ValueError):
    """Raised for invalid grids, non-finite samples and out-of-box queries."""


@dataclass(frozen=True)
class BoundedDomain:
    """Open box ``(lo_1, hi_1) x ... x (lo_d, hi_d)``."""

    lo: tuple
    hi: tuple
    label: str = ""

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or not lo:
            raise GridError("lo and hi must have the same positive length")
        for a, b in zip(lo, hi):
            if not (np.isfinite(a) and np.isfinite(b) and a < b):
                raise GridError(f"empty or unbounded axis ({a}, {b})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def interval(cls, a: float, b: float, label: str = "") -> "BoundedDomain":
        return cls((a,), (b,), label)

    @classmethod
    def centered_box(cls, radius: float, dim: int = 1) -> "BoundedDomain":
        return cls((-radius,) * dim, (radius,) * dim, f"box(R={radius:g})")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_array(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def hi_array(self) -> np.ndarray:
        return np.array(self.hi)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi_array - self.lo_array))

    def contains(self, x) -> np.ndarray | bool:
        """Strict membership; vectorized over leading axes of ``x``."""
        x = np.asarray(x, dtype=float)
        inside = np.all((x > self.lo_array) & (x < self.hi_array), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def distance_to_complement(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        gap = np.minimum(x - self.lo_array, self.hi_array - x)
        return np.min(gap, axis=-1)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor grid on ``[t0, T] x closure(D)``.

    ``n_x`` holds node counts per spatial axis (boundary nodes included).
    """

    domain: BoundedDomain
    T: float
    n_t: int
    n_x: tuple
    t0: float = 0.0

    def __post_init__(self):
        n_x = tuple(int(n) for n in np.atleast_1d(self.n_x))
        if len(n_x) != self.domain.dim:
            raise GridError("n_x must give one node count per axis")
        if self.n_t < 2 or min(n_x) < 3:
            raise GridError("need n_t >= 2 and at least 3 nodes per axis")
        if not self.T > self.t0:
            raise GridError("horizon must exceed the start time")
        object.__setattr__(self, "n_x", n_x)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / (self.n_t - 1)

    @property
    def dx(self) -> np.ndarray:
        return (self.domain.hi_array - self.domain.lo_array) / (np.array(self.n_x) - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_t)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.domain.lo, self.domain.hi, self.n_x)]

    def nodes(self) -> np.ndarray:
        """Spatial node coordinates, shape ``(n_1, ..., n_d, d)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    @property
    def spatial_shape(self) -> tuple:
        return self.n_x

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_x, dtype=bool)
        for axis in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[axis] = 0
            mask[tuple(sl)] = True
            sl[axis] = -1
            mask[tuple(sl)] = True
        return mask

    def with_time(self, t0: float, T: float, n_t: int) -> "SpaceTimeGrid":
        return SpaceTimeGrid(self.domain, T, n_t, self.n_x, t0)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values sampled on a :class:`SpaceTimeGrid` with multilinear
    interpolation in space and linear interpolation in time."""

    grid: SpaceTimeGrid
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        lead = (self.grid.n_t,) + self.grid.n_x
        if values.shape[: len(lead)] != lead:
            raise GridError(f"values shape {values.shape} does not start with {lead}")
        bad = ~np.isfinite(values)
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            raise GridError(f"non-finite value in {self.name or 'grid function'} at index {where}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def component_shape(self) -> tuple:
        return self.values.shape[1 + self.grid.dim:]

    def at_time_index(self, k: int) -> np.ndarray:
        return self.values[k]

    def interpolate(self, t, x) -> np.ndarray:
        return interpolate(self, t, x)


def _locate(coord, lo, h, n):
    s = (coord - lo) / h
    r = np.round(s)
    s = np.where(np.abs(s - r) < 1e-9, r, s)  # snap node queries
    i = np.clip(np.floor(s).astype(int), 0, n - 2)
    w = s - i
    return i, w


def interpolate(f: GridFunction, t, x, *, outside: str = "error") -> np.ndarray:
    """Evaluate ``f`` at time ``t`` and points ``x`` (shape ``(..., d)``).

    ``t`` may be a scalar or broadcast against the leading axes of ``x``.
    Queries outside the grid's space-time box raise :class:`GridError`
    unless ``outside="zero"``, in which case they evaluate to 0.
    """
    g = f.grid
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != g.dim:
        x = x.reshape(x.shape + (1,)) if g.dim == 1 else x
    lead = x.shape[:-1]
    t = np.broadcast_to(np.asarray(t, dtype=float), lead)
    tol = 1e-12 * max(1.0, abs(g.T))
    if np.any(t < g.t0 - tol) or np.any(t > g.T + tol):
        raise GridError(f"time outside [{g.t0}, {g.T}]")
    lo, hi = g.domain.lo_array, g.domain.hi_array
    span_tol = 1e-12 * (hi - lo)
    out_mask = np.any((x < lo - span_tol) | (x > hi + span_tol), axis=-1)
    if out_mask.any() and outside == "error":
        raise GridError(f"point {x[out_mask][0]} outside the grid box")
    xc = np.clip(x, lo, hi)
    tc = np.clip(t, g.t0, g.T)

    it, wt = _locate(tc, g.t0, g.dt, g.n_t)
    dx = g.dx
    idx, wts = [], []
    for a in range(g.dim):
        i, w = _locate(xc[..., a], lo[a], dx[a], g.n_x[a])
        idx.append(i)
        wts.append(w)

    vals = f.values
    comp = f.component_shape
    result = np.zeros(lead + comp)
    for corner in itertools.product((0, 1), repeat=g.dim + 1):
        weight = np.where(corner[0], wt, 1.0 - wt)
        index = [it + corner[0]]
        for a in range(g.dim):
            weight = weight * np.where(corner[a + 1], wts[a], 1.0 - wts[a])
            index.append(idx[a] + corner[a + 1])
        # skip zero weights so exact node queries return stored values bitwise
        contrib = vals[tuple(index)]
        w = weight.reshape(lead + (1,) * len(comp))
        result = result + np.where(w != 0.0, w * contrib, 0.0)
    if out_mask.any():
        result[out_mask] = 0.0
    return result


def sample_field(fn: Callable, grid: SpaceTimeGrid, name: str = "") -> GridFunction:
    """Evaluate ``fn(t, x)`` at every space-time node.

    ``fn`` is called once per time level with ``x`` of shape
    ``(n_1, ..., n_d, d)`` and must broadcast over the leading axes.
    """
    nodes = grid.nodes()
    levels = []
    for k, t in enumerate(grid.times):
        v = np.asarray(fn(t, nodes), dtype=float)
        if v.shape[: grid.dim] != grid.n_x:
            v = np.broadcast_to(v, grid.n_x + v.shape[grid.dim:]) if v.ndim <= grid.dim else v
        bad = ~np.isfinite(v)
        if bad.any():
            node = tuple(int(i) for i in np.argwhere(bad)[0][: grid.dim])
            raise GridError(f"non-finite evaluation of {name or 'field'} at t={t:g}, node {node}")
        levels.append(np.array(v, dtype=float))
    return GridFunction(grid, np.stack(levels), name)


def _cell_average_abs(values: np.ndarray, n_axes: int) -> np.ndarray:
    """Average of |values| over the 2**n_axes corners of each cell."""
    a = np.abs(values)
    for axis in range(n_axes):
        a = 0.5 * (np.take(a, np.arange(a.shape[axis] - 1), axis=axis)
                   + np.take(a, np.arange(1, a.shape[axis]), axis=axis))
    return a


def lqp_norm(f, grid: SpaceTimeGrid, p: float, q: float) -> float:
    """Mixed norm ``(int (int |f|^p dx)^(q/p) dt)^(1/q)`` over ``(t0,T) x D``.

    ``f`` is a scalar :class:`GridFunction` or a callable ``f(t, x)``; a
    callable is evaluated at cell midpoints, a grid function is averaged
    over cell corners.  Integrals use the composite midpoint rule.  An
    infinite exponent takes the supremum over the corresponding variable.
    """
    if not (1 <= p <= np.inf and 1 <= q <= np.inf):
        raise GridError("exponents must lie in [1, inf]")
    d = grid.dim
    if isinstance(f, GridFunction):
        if f.component_shape != ():
            raise GridError("lqp_norm expects a scalar grid function")
        if p == np.inf and q == np.inf:
            return float(np.max(np.abs(f.values)))
        cells = _cell_average_abs(f.values, d + 1)
    else:
        times = grid.times
        tmid = 0.5 * (times[1:] + times[:-1])
        axes = [0.5 * (a[1:] + a[:-1]) for a in grid.axes()]
        mids = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        cells = np.stack([np.abs(np.asarray(f(t, mids), dtype=float)) * np.ones(mids.shape[:-1])
                          for t in tmid])
        bad = ~np.isfinite(cells)
        if bad.any():
            raise GridError(f"non-finite sample at cell {tuple(np.argwhere(bad)[0])}")
    if cells.size == 0:
        raise GridError("empty grid")
    vol = float(np.prod(grid.dx))
    space_axes = tuple(range(1, d + 1))
    if p == np.inf:
        inner = np.max(cells, axis=space_axes)
    else:
        inner = (np.sum(cells ** p, axis=space_axes) * vol) ** (1.0 / p)
    if q == np.inf:
        return float(np.max(inner))
    return float((np.sum(inner ** q) * grid.dt) ** (1.0 / q))


@dataclass
class EllipticityReport:
    passed: bool
    min_eigenvalue: float
    max_eigenvalue: float
    worst_eigenvalue: float
    worst_location: tuple
    kappa: float


def ellipticity_check(field, grid: SpaceTimeGrid, samples: int = 1000, seed: int = 0,
                      symmetry_tol: float = 1e-10) -> EllipticityReport:
    """Check that the eigenvalues of ``sigma sigma^T`` lie in
    ``[1/kappa, kappa]`` at sampled space-time nodes.

    All nodes are used when ``samples`` exceeds the node count; otherwise a
    seeded random subset.  The worst eigenvalue is the one furthest outside
    (or closest to the edge of) the admissible band, in log scale.
    """
    if samples < 1:
        raise GridError("samples must be >= 1")
    nodes = grid.nodes().reshape(-1, grid.dim)
    times = grid.times
    total = len(times) * len(nodes)
    if samples >= total:
        ti, xi = np.divmod(np.arange(total), len(nodes))
    else:
        rng = np.random.default_rng(seed)
        flat = rng.choice(total, size=samples, replace=False)
        flat.sort()
        ti, xi = np.divmod(flat, len(nodes))
    t = times[ti]
    x = nodes[xi]
    sig = np.asarray(field.diffusion(t, x), dtype=float)
    sig = sig.reshape(len(x), grid.dim, grid.dim)
    a = sig @ np.swapaxes(sig, -1, -2)
    if np.max(np.abs(a - np.swapaxes(a, -1, -2))) > symmetry_tol * max(1.0, np.max(np.abs(a))):
        raise GridError("sigma sigma^T is not symmetric; diffusion evaluation is broken")
    eig = np.linalg.eigvalsh(a)
    kappa = field.kappa
    with np.errstate(divide="ignore"):  # a zero eigenvalue scores +inf
        hi_score = np.log(eig[:, -1] / kappa)
        lo_score = np.log(1.0 / (kappa * np.maximum(eig[:, 0], 0.0)))
    score = np.maximum(hi_score, lo_score)
    w = int(np.argmax(score))
    worst = eig[w, -1] if hi_score[w] >= lo_score[w] else eig[w, 0]
    lo, hi = float(eig[:, 0].min()), float(eig[:, -1].max())
    passed = bool(lo >= 1.0 / kappa * (1 - 1e-12) and hi <= kappa * (1 + 1e-12))
    return EllipticityReport(passed, lo, hi, float(worst), (float(t[w]),) + tuple(map(float, x[w])), kappa)


def holder_seminorm_estimate(f: GridFunction, alpha: float, time_index: int = 0,
                             max_pairs: int = 2_000_000, seed: int = 0) -> float:
    """Lower estimate of the spatial Hölder-``alpha`` seminorm at one time level.

    Scans every node pair when the level has at most 10**4 nodes, otherwise
    ``max_pairs`` random pairs; the result never exceeds the true seminorm
    of any function agreeing with ``f`` at the nodes.
    """
    if not 0 < alpha <= 1:
        raise GridError("alpha must lie in (0, 1]")
    g = f.grid
    vals = np.asarray(f.values[time_index]).reshape(int(np.prod(g.n_x)), -1)
    pts = g.nodes().reshape(-1, g.dim)
    n = len(pts)
    if n < 2:
        raise GridError("need at least two nodes")
    if n <= 10_000:
        best = 0.0
        for i in range(n - 1):
            dist = np.linalg.norm(pts[i + 1:] - pts[i], axis=-1)
            diff = np.linalg.norm(vals[i + 1:] - vals[i], axis=-1)
            best = max(best, float(np.max(diff / dist ** alpha)))
        return best
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, max_pairs)
    j = rng.integers(0, n, max_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    dist = np.linalg.norm(pts[i] - pts[j], axis=-1)
    diff = np.linalg.norm(vals[i] - vals[j], axis=-1)
    return float(np.max(diff / dist ** alpha))
