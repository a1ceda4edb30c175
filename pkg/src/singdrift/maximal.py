"""Local Hardy-Littlewood maximal function on a box and the even-reflection
extension across box faces."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import BoundedDomain, GridError, GridFunction, SpaceTimeGrid, holder_seminorm_estimate


def _ball_offsets(radius_sq: float, dx: np.ndarray, reach: np.ndarray) -> list[tuple]:
    """Integer offsets ``o`` with ``sum((o*dx)**2) < radius_sq``, lexicographic."""
    ranges = [range(-int(r), int(r) + 1) for r in reach]
    out = []
    for o in itertools.product(*ranges):
        if float(np.sum((np.array(o) * dx) ** 2)) < radius_sq:
            out.append(o)
    return out


def _maximal_level(a: np.ndarray, dist: np.ndarray, dx: np.ndarray) -> np.ndarray:
    h = float(np.min(dx))
    d = a.ndim
    m = np.abs(a).astype(float)
    absf = m.copy()
    k_max = int(np.ceil(np.max(dist) / h))
    if k_max < 2:
        return m
    reach = np.floor(k_max * h / dx).astype(int)
    padded = np.pad(absf, [(r, r) for r in reach])
    for k in range(2, k_max + 1):
        r = k * h
        admissible = dist > r
        if not admissible.any():
            break
        offsets = _ball_offsets((k * h) ** 2, dx, np.floor(r / dx))
        acc = np.zeros_like(absf)
        for o in offsets:
            sl = tuple(slice(reach[i] + o[i], reach[i] + o[i] + a.shape[i]) for i in range(d))
            acc = acc + padded[sl]
        avg = acc / len(offsets)
        m = np.where(admissible & (avg > m), avg, m)
    return m


def local_maximal(f: GridFunction, domain: BoundedDomain | None = None) -> GridFunction:
    """Maximal function restricted to balls inside ``domain``, levelwise in time.

    At node ``x`` this is the largest average of ``|f|`` over grid nodes in
    an open ball ``A(x, r)`` with ``r`` on the ladder ``h, 2h, ...``
    (``h`` the smallest spacing) and ``r < dist(x, D^c)``.  The ``r = h``
    ball holds only ``x``, so nodes within ``h`` of the boundary get
    ``|f(x)|``.  Averages over the discrete ladder approximate the
    continuum supremum from below.
    """
    g = f.grid
    if f.component_shape != ():
        raise GridError("local_maximal expects a scalar grid function")
    domain = domain or g.domain
    dist = domain.distance_to_complement(g.nodes())
    out = np.stack([_maximal_level(f.values[k], dist, g.dx) for k in range(g.n_t)])
    return GridFunction(g, out, f"M[{f.name}]")


def global_maximal(f: GridFunction) -> GridFunction:
    """Centered maximal function with radii capped by the function's own grid box
    (the enlarged box after :func:`extend_reflection`)."""
    return local_maximal(f, f.grid.domain)


def brute_force_maximal(values: np.ndarray, grid: SpaceTimeGrid, domain: BoundedDomain | None = None) -> np.ndarray:
    """Node-by-node reference for one time level (quadratic cost; tests only)."""
    domain = domain or grid.domain
    dx = grid.dx
    h = float(np.min(dx))
    shape = grid.n_x
    idx = list(itertools.product(*[range(n) for n in shape]))
    nodes = grid.nodes()
    out = np.empty(shape)
    for i in idx:
        dist = float(domain.distance_to_complement(nodes[i]))
        best = abs(float(values[i]))
        k = 2
        while k * h < dist:
            r2 = (k * h) ** 2
            total, count = 0.0, 0
            for j in idx:
                if float(np.sum(((np.array(j) - np.array(i)) * dx) ** 2)) < r2:
                    total = total + abs(float(values[j]))
                    count += 1
            best = max(best, total / count)
            k += 1
        out[i] = best
    return out


@dataclass
class MaximalReport:
    name: str
    output: GridFunction
    radius_count: np.ndarray
    operator_norm_estimate: float
    p: float


def _spatial_lp(values: np.ndarray, vol: float, p: float) -> float:
    return float((np.sum(np.abs(values) ** p) * vol) ** (1.0 / p))


def maximal_report(f: GridFunction, p: float = 2.0, domain: BoundedDomain | None = None,
                   time_index: int = 0) -> MaximalReport:
    """Apply :func:`local_maximal` and estimate ``||M_D f||_p / ||f||_p`` at one level."""
    g = f.grid
    domain = domain or g.domain
    out = local_maximal(f, domain)
    vol = float(np.prod(g.dx))
    denom = _spatial_lp(f.values[time_index], vol, p)
    ratio = _spatial_lp(out.values[time_index], vol, p) / denom if denom > 0 else 0.0
    h = float(np.min(g.dx))
    dist = domain.distance_to_complement(g.nodes())
    radii = np.maximum(np.ceil(dist / h) - 1, 0).astype(int)
    return MaximalReport(f.name, out, radii, ratio, p)


def smooth_cutoff(s):
    """C^2 quintic step: 1 at ``s <= 0``, 0 at ``s >= 1``."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    return 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


@dataclass
class ExtensionResult:
    extended: GridFunction
    margin_nodes: tuple
    holder_ratio: float | None = None
    alpha: float | None = None


def extend_reflection(f: GridFunction, margin: float, alpha: float | None = None) -> ExtensionResult:
    """Extend ``f`` from its box to a box enlarged by ``margin`` on every side.

    Outside nodes take the value at their mirror image across each face
    (``y -> 2*face - y``, applied axis by axis), multiplied by a smooth
    cutoff equal to 1 on the box and 0 on the outer boundary.  Values on the
    original grid are copied unchanged.  When ``alpha`` is given the ratio
    of Hölder seminorms (extended / original, first time level) is measured
    by pair scans and returned as ``holder_ratio``.
    """
    g = f.grid
    dx = g.dx
    width = g.domain.hi_array - g.domain.lo_array
    if margin <= 0 or np.any(margin > 0.5 * width + 1e-12):
        raise GridError("margin must be positive and at most half the box width per axis")
    m = np.maximum(np.round(margin / dx).astype(int), 1)
    lo = g.domain.lo_array - m * dx
    hi = g.domain.hi_array + m * dx
    big = SpaceTimeGrid(BoundedDomain(tuple(lo), tuple(hi), "extended"), g.T, g.n_t,
                        tuple(n + 2 * k for n, k in zip(g.n_x, m)), g.t0)

    src = []
    weight = np.ones(big.n_x)
    for a, (n, k) in enumerate(zip(g.n_x, m)):
        i = np.arange(-k, n + k)
        mirrored = np.where(i < 0, -i, np.where(i > n - 1, 2 * (n - 1) - i, i))
        src.append(mirrored)
        outside = np.maximum(np.maximum(-i, i - (n - 1)), 0) / k
        shape = [1] * g.dim
        shape[a] = len(i)
        weight = weight * smooth_cutoff(outside).reshape(shape)

    mesh = np.ix_(*src)
    comp = f.component_shape
    vals = f.values[(slice(None),) + mesh]
    vals = vals * weight.reshape((1,) + big.n_x + (1,) * len(comp))
    inner = (slice(None),) + tuple(slice(k, k + n) for k, n in zip(m, g.n_x))
    vals[inner] = f.values  # bitwise identity on the original box
    ext = GridFunction(big, vals, f"Q[{f.name}]")

    ratio = None
    if alpha is not None:
        base = holder_seminorm_estimate(f, alpha)
        ratio = holder_seminorm_estimate(ext, alpha) / base if base > 0 else 0.0
    return ExtensionResult(ext, tuple(int(k) for k in m), ratio, alpha)
