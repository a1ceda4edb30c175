"""Lyapunov certificates ``L_t V <= C V`` and the non-explosion checks built on them."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .fields import CoefficientField
from .geometry import BoundedDomain
from .simulate import PathBatch, PathSample

log = logging.getLogger(__name__)


class LyapunovError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LyapunovSpec:
    """Candidate ``V`` with user-supplied derivatives.

    ``V(t, x)`` and ``dV_dt(t, x)`` return shape ``x.shape[:-1]``,
    ``grad(t, x)`` returns ``(..., d)`` and ``hess(t, x)`` ``(..., d, d)``.
    ``radial_inf(R)``, when given, is the exact infimum of ``V`` over
    ``[0, T] x {|x|_inf = R}`` (the boundary of the box ``D_R``).
    """

    V: Callable
    dV_dt: Callable
    grad: Callable
    hess: Callable
    C: float = 0.0
    radial_inf: Callable | None = None
    name: str = "V"


def quadratic_lyapunov(dim: int = 1, offset: float = 1.0, C: float = 0.0) -> LyapunovSpec:
    """``V = offset + |x|^2``; ``offset = 1`` is the working default, ``offset = 0`` the bare square."""

    def V(t, x):
        x = np.asarray(x, dtype=float)
        return offset + np.sum(x * x, axis=-1)

    def dV_dt(t, x):
        return np.zeros(np.shape(x)[:-1])

    def grad(t, x):
        return 2.0 * np.asarray(x, dtype=float)

    def hess(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(2.0 * np.eye(dim), x.shape + (dim,)).copy()

    return LyapunovSpec(V, dV_dt, grad, hess, C, lambda R: offset + float(R) ** 2,
                        name=f"{offset:g}+|x|^2")


def generator_apply(field: CoefficientField, spec: LyapunovSpec, t, x) -> np.ndarray:
    """``dV/dt + b . grad V + (1/2) tr(sigma sigma^T hess V)`` at points ``x`` of shape ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    b = np.asarray(field.drift(t, x), dtype=float)
    a = field.a(t, x)
    with np.errstate(invalid="ignore", over="ignore"):
        out = (np.asarray(spec.dV_dt(t, x), dtype=float)
               + np.sum(b * np.asarray(spec.grad(t, x), dtype=float), axis=-1)
               + 0.5 * np.einsum("...ij,...ji->...", a, np.asarray(spec.hess(t, x), dtype=float)))
    bad = ~np.isfinite(out)
    if np.any(bad):
        where = np.argwhere(bad)[0]
        raise LyapunovError(f"non-finite generator value at t={t}, x={x[tuple(where)].tolist()}")
    return out


@dataclass
class LyapunovReport:
    passed: bool
    C: float
    c_hat: float
    worst_excess: float
    worst_point: list
    samples: int
    failure: str = ""


def sample_region(region: BoundedDomain, n: int = 201) -> np.ndarray:
    """Tensor grid of ``n`` points per axis on the closed box, shape ``(m, d)``."""
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(region.lo, region.hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, region.dim)


def verify_lyapunov(field: CoefficientField, spec: LyapunovSpec, region, C: float | None = None,
                    times: Sequence[float] = (0.0,), n: int = 201) -> LyapunovReport:
    """Check ``L_t V <= C V`` on samples and report ``C_hat = max L_t V / V``.

    ``region`` is a :class:`BoundedDomain` (sampled on an ``n``-point grid
    per axis, boundary included) or an explicit ``(m, d)`` sample array.
    A sample with ``V = 0`` and ``L_t V > 0`` makes every ``C`` fail; the
    report names that point.
    """
    C = spec.C if C is None else float(C)
    pts = sample_region(region, n) if isinstance(region, BoundedDomain) else np.asarray(region, dtype=float)
    c_hat, excess, worst, failure = -np.inf, -np.inf, None, ""
    for t in times:
        v = np.asarray(spec.V(t, pts), dtype=float)
        if np.any(v < 0):
            raise LyapunovError(f"V negative at x={pts[np.argmax(v < 0)].tolist()}")
        lv = generator_apply(field, spec, t, pts)
        ex = lv - C * v
        i = int(np.argmax(ex))
        if ex[i] > excess:
            excess, worst = float(ex[i]), [float(t)] + pts[i].tolist()
        zero = (v == 0) & (lv > 0)
        if zero.any():
            p = pts[np.argmax(zero)]
            failure = failure or f"V = 0 but L_t V = {lv[np.argmax(zero)]:.4g} > 0 at t={t}, x={p.tolist()}"
            c_hat = np.inf
        pos = v > 0
        if pos.any():
            c_hat = max(c_hat, float(np.max(lv[pos] / v[pos])))
    passed = excess <= 0 and not failure
    if failure:
        log.warning("Lyapunov condition fails: %s", failure)
    return LyapunovReport(passed, C, max(c_hat, 0.0), excess, worst, len(pts) * len(times), failure)


def radial_infimum(spec: LyapunovSpec, R: float, dim: int = 1, T: float = 1.0,
                   n: int = 101, n_t: int = 11) -> float:
    """Infimum of ``V`` over ``[0, T] x`` boundary of ``(-R, R)^d``.

    Uses the analytic form when the spec has one, else samples every face on
    an ``n``-point grid at ``n_t`` times.
    """
    if spec.radial_inf is not None:
        return float(spec.radial_inf(R))
    best = np.inf
    face_axes = [np.linspace(-R, R, n)] * (dim - 1)
    for axis in range(dim):
        for side in (-R, R):
            if dim == 1:
                pts = np.array([[side]])
            else:
                grid = np.stack(np.meshgrid(*face_axes, indexing="ij"), axis=-1).reshape(-1, dim - 1)
                pts = np.insert(grid, axis, side, axis=1)
            for t in np.linspace(0.0, T, n_t):
                best = min(best, float(np.min(spec.V(t, pts))))
    return best


def radial_growth(spec: LyapunovSpec, radii: Sequence[float], dim: int = 1, T: float = 1.0) -> tuple[bool, list]:
    """Radial infima along the ladder and whether they strictly increase."""
    vals = [radial_infimum(spec, R, dim, T) for R in radii]
    return bool(np.all(np.diff(vals) > 0)), vals


def explosion_bound(spec: LyapunovSpec, C: float, x0, N: float, R: float, dim: int | None = None) -> float:
    """``min(1, e^{C N} V(0, x0) / inf_{|x| = R} V)``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dim = dim or x0.shape[-1]
    denom = radial_infimum(spec, R, dim, N)
    if denom <= 0:
        warnings.warn(f"radial infimum of V vanishes at R={R}; bound is trivial", RuntimeWarning, stacklevel=2)
        return 1.0
    v0 = float(spec.V(0.0, x0[None])[0])
    with np.errstate(over="ignore"):
        return float(min(1.0, np.exp(C * N) * v0 / denom))


@dataclass
class SupermartingaleReport:
    passed: bool
    C: float
    times: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    v0: float
    violations: list

    def rows(self) -> list[dict]:
        return [dict(t=float(t), mean=float(m), se=float(s), limit=float(self.v0 + 3 * s),
                     ok=bool(m <= self.v0 + 3 * s))
                for t, m, s in zip(self.times, self.means, self.std_errors)]


MIN_PATHS = 1000


def _stopped_ladder(paths) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(ladder times, stopped times ``(L, n)``, stopped states ``(L, n, d)``, starts ``(n, d)``)."""
    if isinstance(paths, PathBatch):
        lt = paths.ladder_times
        tau = np.nan_to_num(paths.exit_time, nan=np.inf)
        stop_t = np.minimum(lt[:, None], tau[None, :])
        if paths.trajectories is not None:
            starts = paths.trajectories[0]
        elif paths.ladder[0] == 0:
            starts = paths.snapshots[0]
        else:
            raise LyapunovError("batch needs ladder step 0 or recorded trajectories for the start values")
        return lt, stop_t, paths.snapshots, starts
    paths = list(paths)
    if not paths or not all(isinstance(p, PathSample) for p in paths):
        raise LyapunovError("expected a PathBatch or a collection of PathSample")
    dt = paths[0].dt
    horizon = max(len(p.times) for p in paths) - 1
    lt = paths[0].times[0] + dt * np.arange(horizon + 1)
    n, d = len(paths), paths[0].states.shape[-1]
    states = np.empty((len(lt), n, d))
    stop_t = np.empty((len(lt), n))
    for i, p in enumerate(paths):
        k = np.minimum(np.arange(len(lt)), len(p.times) - 1)
        states[:, i] = p.states[k]
        stop_t[:, i] = p.times[k]
    return lt, stop_t, states, np.stack([p.states[0] for p in paths])


def supermartingale_check(paths, spec: LyapunovSpec, C: float | None = None) -> SupermartingaleReport:
    """Test ``E e^{-C (t ^ tau)} V(t ^ tau, X_{t ^ tau}) <= V(0, x0)`` on a time ladder.

    Passes iff every ladder mean is at most ``V(0, x0) + 3 SE``.  ``paths``
    is a :class:`PathBatch` (its ladder is used) or a list of
    :class:`PathSample` (every grid time is used).
    """
    C = spec.C if C is None else float(C)
    lt, stop_t, states, starts = _stopped_ladder(paths)
    n = stop_t.shape[1]
    if n < MIN_PATHS:
        raise LyapunovError(f"supermartingale check needs at least {MIN_PATHS} paths, got {n}")
    v0 = float(np.mean(spec.V(0.0, starts)))
    means, ses = np.empty(len(lt)), np.empty(len(lt))
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(len(lt)):
            w = np.exp(-C * stop_t[j]) * np.asarray(spec.V(stop_t[j], states[j]), dtype=float)
            means[j] = w.mean()
            ses[j] = w.std(ddof=1) / np.sqrt(n)
    ok = means <= v0 + 3 * ses
    bad = [(float(lt[j]), float(means[j]), float(ses[j])) for j in np.flatnonzero(~ok)]
    return SupermartingaleReport(bool(ok.all()), C, lt, means, ses, v0, bad)
