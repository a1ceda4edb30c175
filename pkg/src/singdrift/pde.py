"""Backward Cauchy-Dirichlet problem on a box,

    du/dt + (1/2) a^{ij} d_i d_j u + b . grad u + f = 0   in (t0, T) x D,
    u(T, .) = 0,   u = g on (t0, T) x boundary(D),

solved by fully implicit finite differences (d <= 2).  Drift terms use
centered differences while the cell Péclet number ``|b_i| h_i / A_ii``
(``A = a/2``) is at most 2 and first-order upwinding otherwise, so every
step is an M-matrix solve in the absence of cross diffusion.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.linalg import solve_banded
from scipy.ndimage import correlate1d
from scipy.sparse.linalg import splu

from .fields import CoefficientField
from .geometry import (
    BoundedDomain,
    GridFunction,
    SpaceTimeGrid,
    holder_seminorm_estimate,
    lqp_norm,
    sample_field,
)

log = logging.getLogger(__name__)

SOLVE_TOL = 1e-10


class PDEError(RuntimeError):
    """Linear solve failure or a degenerate operator."""


class WindowError(PDEError):
    """No admissible window length exists on the given grid."""


@dataclass(frozen=True, eq=False)
class PDEProblem:
    """Data of one backward Dirichlet problem.

    ``source(t, x)`` returns shape ``x.shape[:-1]`` for a scalar problem or
    ``x.shape[:-1] + (m,)`` for ``m`` right-hand sides sharing the operator.
    ``boundary`` defaults to zero.  ``mollify = n > 0`` replaces b, sigma and
    f by their space-time mollifications at level n before discretizing.
    """

    field: CoefficientField
    source: Callable
    domain: BoundedDomain
    T: float
    t0: float = 0.0
    boundary: Callable | None = None
    mollify: int = 0

    @classmethod
    def from_theorem_form(cls, field, rhs, domain, T, **kw) -> "PDEProblem":
        """Build from the ``d_t u + L u = rhs`` form (source is ``-rhs``)."""
        return cls(field, lambda t, x: -np.asarray(rhs(t, x)), domain, T, **kw)


@dataclass(eq=False)
class PDESolution:
    u: GridFunction
    grad: GridFunction
    hessian: GridFunction
    residuals: np.ndarray
    theta: float = 1.0
    upwind_fraction: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.u.grid

    def value(self, t, x):
        return self.u.interpolate(t, x)


# ---------------------------------------------------------------------------
# mollification


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _smooth_axis(values, axis, spacing, radius):
    J = int(np.floor(radius / spacing))
    w = _bump(np.arange(-J, J + 1) * spacing / radius)
    num = correlate1d(values, w, axis=axis, mode="constant", cval=0.0)
    ones = np.ones(values.shape[axis])
    den = correlate1d(ones, w, mode="constant", cval=0.0)
    shape = [1] * values.ndim
    shape[axis] = -1
    return num / den.reshape(shape)


def mollify(f: GridFunction, n: int) -> GridFunction:
    """Space-time convolution with a normalized bump of radius ``(T-t0)/n`` in
    time and ``diam(D)/n`` in space; kernels are renormalized where they
    overhang the grid.  Axes whose radius is below the grid spacing are left
    alone (with a warning)."""
    if n < 1:
        raise ValueError("mollification level must be >= 1")
    g = f.grid
    radii = [(g.T - g.t0) / n] + [g.domain.diameter / n] * g.dim
    spacings = [g.dt] + list(g.dx)
    vals = np.array(f.values)
    skipped = []
    for axis, (r, h) in enumerate(zip(radii, spacings)):
        if r < h:
            skipped.append(axis)
            continue
        vals = _smooth_axis(vals, axis, h, r)
    if skipped:
        warnings.warn(f"mollifier radius below grid spacing on axes {skipped}; left unchanged",
                      RuntimeWarning, stacklevel=2)
    return GridFunction(g, vals, f"moll{n}[{f.name}]")


# ---------------------------------------------------------------------------
# derivatives


def gradient_hessian(u: GridFunction) -> tuple[GridFunction, GridFunction]:
    """Spatial gradient and Hessian by second-order differences.

    Central differences inside, second-order one-sided differences on the
    boundary (first-order for the Hessian on 3-node axes).  Component axes
    of ``u`` are kept in front of the derivative axes: a vector ``u`` gives
    ``grad[..., l, i] = d_i u^l``.
    """
    g = u.grid
    d = g.dim
    if min(g.n_x) < 3:
        raise ValueError("need at least 3 nodes per axis")
    vals = u.values
    dx = g.dx
    grads = [np.gradient(vals, dx[i], axis=1 + i, edge_order=2) for i in range(d)]
    grad = np.stack(grads, axis=-1)
    hess = np.empty(vals.shape + (d, d))
    for i in range(d):
        hess[..., i, i] = _second_difference(vals, 1 + i, dx[i])
        for j in range(i + 1, d):
            mixed = np.gradient(grads[i], dx[j], axis=1 + j, edge_order=2)
            hess[..., i, j] = mixed
            hess[..., j, i] = mixed
    return (GridFunction(g, grad, f"grad[{u.name}]"), GridFunction(g, hess, f"hess[{u.name}]"))


def _second_difference(v, axis, h):
    n = v.shape[axis]
    take = lambda idx: np.take(v, idx, axis=axis)
    out = np.empty_like(v)
    inner = [slice(None)] * v.ndim
    inner[axis] = slice(1, n - 1)
    out[tuple(inner)] = (take(np.arange(2, n)) - 2 * take(np.arange(1, n - 1)) + take(np.arange(0, n - 2))) / h ** 2
    first = [slice(None)] * v.ndim
    last = [slice(None)] * v.ndim
    first[axis] = 0
    last[axis] = n - 1
    if n >= 4:
        out[tuple(first)] = (2 * take(0) - 5 * take(1) + 4 * take(2) - take(3)) / h ** 2
        out[tuple(last)] = (2 * take(n - 1) - 5 * take(n - 2) + 4 * take(n - 3) - take(n - 4)) / h ** 2
    else:
        out[tuple(first)] = (take(0) - 2 * take(1) + take(2)) / h ** 2
        out[tuple(last)] = out[tuple(first)]
    return out


# ---------------------------------------------------------------------------
# coefficient sources


class _Coefficients:
    """Per-level drift, diffusion matrix, source and boundary values."""

    def __init__(self, problem: PDEProblem, grid: SpaceTimeGrid):
        self.problem = problem
        self.grid = grid
        self.nodes = grid.nodes()
        self.d = grid.dim
        fld = problem.field
        self.moll = None
        if problem.mollify:
            n = problem.mollify
            b = mollify(sample_field(fld.drift, grid, "b"), n)
            s = mollify(sample_field(fld.diffusion, grid, "sigma"), n)
            f = mollify(sample_field(self._source_fn, grid, "f"), n)
            self.moll = (b.values, s.values, f.values)

    def _source_fn(self, t, x):
        f = np.asarray(self.problem.source(t, x), dtype=float)
        return np.broadcast_to(f, x.shape[:-1] + f.shape[x.ndim - 1:]) if f.ndim >= x.ndim - 1 else np.broadcast_to(f, x.shape[:-1])

    def at(self, k: int, t: float):
        if self.moll is not None:
            b, s, f = (arr[k] for arr in self.moll)
        else:
            fld = self.problem.field
            b = np.asarray(fld.drift(t, self.nodes), dtype=float)
            s = np.asarray(fld.diffusion(t, self.nodes), dtype=float)
            f = np.asarray(self.problem.source(t, self.nodes), dtype=float)
        b = np.broadcast_to(b, self.grid.n_x + (self.d,))
        s = np.broadcast_to(s, self.grid.n_x + (self.d, self.d))
        a = s @ np.swapaxes(s, -1, -2)
        f = np.broadcast_to(f, self.grid.n_x + f.shape[self.d:]) if f.ndim >= self.d else np.broadcast_to(f, self.grid.n_x)
        self.scalar = f.ndim == self.d
        if self.scalar:
            f = f[..., None]
        return b, a, f

    def boundary(self, t: float, m: int):
        if self.problem.boundary is None:
            return None
        gval = np.asarray(self.problem.boundary(t, self.nodes), dtype=float)
        if gval.ndim == self.d:
            gval = gval[..., None]
        return np.broadcast_to(gval, self.grid.n_x + (m,))


# ---------------------------------------------------------------------------
# operator assembly


def _drift_stencil(B, A, h):
    """Return (lower, diag, upper) drift coefficients and the upwind mask."""
    central = np.abs(B) * h <= 2.0 * A
    lower = np.where(central, -B / (2 * h), np.where(B < 0, -B / h, 0.0))
    upper = np.where(central, B / (2 * h), np.where(B > 0, B / h, 0.0))
    diag = np.where(central, 0.0, -np.abs(B) / h)
    return lower, diag, upper, ~central


def _banded_1d(b, a, h, dt):
    n = b.shape[0]
    A = 0.5 * a[1:-1, 0, 0]
    B = b[1:-1, 0]
    if np.all(A <= 1e-14):
        raise PDEError("diffusion vanishes on every interior node; ellipticity violated")
    lo_d, di_d, up_d, upwind = _drift_stencil(B, A, h)
    diff = A / h ** 2
    lower = diff + lo_d
    diag = -2 * diff + di_d
    upper = diff + up_d
    ab = np.zeros((3, n))
    ab[1, 0] = ab[1, -1] = 1.0
    ab[1, 1:-1] = 1.0 - dt * diag
    ab[0, 2:] = -dt * upper
    ab[2, :-2] = -dt * lower
    return ab, upwind


def _banded_matvec(ab, u):
    out = ab[1][:, None] * u
    out[:-1] += ab[0, 1:][:, None] * u[1:]
    out[1:] += ab[2, :-1][:, None] * u[:-1]
    return out


def _sparse_2d(b, a, dx, dt):
    n1, n2 = b.shape[:2]
    idx = np.arange(n1 * n2).reshape(n1, n2)
    interior = np.zeros((n1, n2), dtype=bool)
    interior[1:-1, 1:-1] = True
    A = 0.5 * a
    if np.all(np.linalg.eigvalsh(A[1:-1, 1:-1]).min(axis=-1) <= 1e-14):
        raise PDEError("diffusion degenerate on every interior node; ellipticity violated")
    rows, cols, vals = [], [], []
    ii, jj = np.nonzero(interior)
    p = idx[ii, jj]
    diag = np.zeros(len(p))
    upwind_count = 0
    for axis, h in enumerate(dx):
        Aii = A[ii, jj, axis, axis]
        B = b[ii, jj, axis]
        lo_d, di_d, up_d, upw = _drift_stencil(B, Aii, h)
        upwind_count += int(upw.sum())
        diff = Aii / h ** 2
        diag += -2 * diff + di_d
        step = (1, 0) if axis == 0 else (0, 1)
        for sign, coef in ((-1, diff + lo_d), (1, diff + up_d)):
            q = idx[ii + sign * step[0], jj + sign * step[1]]
            rows.append(p)
            cols.append(q)
            vals.append(-dt * coef)
    # (1/2)(a12 + a21) d_x d_y with the 4-corner centered stencil
    cross = (A[ii, jj, 0, 1] + A[ii, jj, 1, 0]) / (4 * dx[0] * dx[1])
    for si, sj, sgn in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        rows.append(p)
        cols.append(idx[ii + si, jj + sj])
        vals.append(-dt * sgn * cross)
    rows.append(p)
    cols.append(p)
    vals.append(1.0 - dt * diag)
    bi, bj = np.nonzero(~interior)
    bp = idx[bi, bj]
    rows.append(bp)
    cols.append(bp)
    vals.append(np.ones(len(bp)))
    M = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n1 * n2, n1 * n2))
    return M, upwind_count / max(1, 2 * len(p))


def solve_cauchy_dirichlet(problem: PDEProblem, grid: SpaceTimeGrid) -> PDESolution:
    """March the backward problem from ``T`` down to ``t0`` with theta = 1.

    Returns the solution with its gradient and Hessian; terminal and
    lateral boundary values are written exactly.  Raises :class:`PDEError`
    if a step's relative residual exceeds ``1e-10``.
    """
    d = grid.dim
    if d not in (1, 2):
        raise PDEError("only d = 1 and d = 2 are supported")
    if grid.domain != problem.domain and (grid.domain.lo, grid.domain.hi) != (problem.domain.lo, problem.domain.hi):
        raise PDEError("grid and problem domains differ")
    coeffs = _Coefficients(problem, grid)
    times = grid.times
    dt = grid.dt
    b, a, f = coeffs.at(grid.n_t - 1, times[-1])
    m = f.shape[-1]
    scalar = coeffs.scalar
    n_nodes = int(np.prod(grid.n_x))
    bmask = grid.boundary_mask().reshape(-1)

    U = np.zeros((grid.n_t, n_nodes, m))
    residuals = np.zeros(grid.n_t - 1)
    upwind_total = 0.0
    cache_key, cache = None, None
    for k in range(grid.n_t - 2, -1, -1):
        t = times[k]
        b, a, f = coeffs.at(k, t)
        rhs = U[k + 1] + dt * f.reshape(n_nodes, m)
        gval = coeffs.boundary(t, m)
        rhs[bmask] = 0.0 if gval is None else gval.reshape(n_nodes, m)[bmask]
        if d == 1:
            ab, upw = _banded_1d(b, a, grid.dx[0], dt)
            upwind_total += upw.mean() if upw.size else 0.0
            sol = solve_banded((1, 1), ab, rhs)
            res_vec = _banded_matvec(ab, sol) - rhs
        else:
            key = (b.tobytes(), a.tobytes())
            if key != cache_key:
                M, frac = _sparse_2d(b, a, grid.dx, dt)
                cache_key, cache = key, (M, splu(M), frac)
            M, lu, frac = cache
            upwind_total += frac
            sol = lu.solve(rhs)
            res_vec = M @ sol - rhs
        sol[bmask] = rhs[bmask]
        scale = max(1.0, float(np.max(np.abs(rhs))))
        residuals[k] = float(np.max(np.abs(res_vec))) / scale
        if not np.all(np.isfinite(sol)) or residuals[k] > SOLVE_TOL:
            raise PDEError(f"linear solve failed at time step {k} (residual {residuals[k]:.3e})")
        U[k] = sol

    shape = (grid.n_t,) + grid.n_x + ((m,) if not scalar else ())
    u = GridFunction(grid, U.reshape(shape), "u")
    grad, hess = gradient_hessian(u)
    return PDESolution(u, grad, hess, residuals, 1.0, upwind_total / max(1, grid.n_t - 1),
                       {"dt": dt, "dx": tuple(grid.dx), "mollify": problem.mollify})


def export_slices(solution: PDESolution, path, time_indices=None) -> int:
    """Write ``u`` and its gradient at the given time levels as CSV.

    Columns: ``t, x1..xd, u[_l], du[_l]_dx1..`` (one ``u`` column per component).
    Returns the number of data rows.
    """
    g = solution.grid
    d = g.dim
    u = solution.u.values
    G = solution.grad.values
    if u.ndim == 1 + d:
        u = u[..., None]
        G = G[..., None, :]
    m = u.shape[-1]
    idx = range(g.n_t) if time_indices is None else time_indices
    names = ["u"] if m == 1 else [f"u_{l}" for l in range(m)]
    header = ["t"] + [f"x{i + 1}" for i in range(d)] + names
    header += [f"d{n}_dx{i + 1}" for n in names for i in range(d)]
    nodes = g.nodes().reshape(-1, d)
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in idx:
            uk = u[k].reshape(-1, m)
            gk = G[k].reshape(-1, m * d)
            for j in range(len(nodes)):
                w.writerow([repr(float(g.times[k]))] + [repr(float(v)) for v in nodes[j]]
                           + [repr(float(v)) for v in uk[j]] + [repr(float(v)) for v in gk[j]])
                rows += 1
    return rows


# ---------------------------------------------------------------------------
# estimates on the solution


@dataclass
class DecayReport:
    times: np.ndarray
    gaps: np.ndarray
    sup_u: np.ndarray
    grad_holder: np.ndarray
    exponent: float | None
    exponent_se: float | None
    constant: float | None
    monotone: bool
    floor: float | None = None

    @property
    def meets_floor(self) -> bool | None:
        if self.floor is None or self.exponent is None:
            return None
        return self.exponent >= self.floor


def loglog_fit(x, y):
    """Least-squares slope, its standard error and intercept of log y on log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    n = len(lx)
    if n > 2:
        s2 = float(resid @ resid) / (n - 2)
        cov = s2 * np.linalg.inv(A.T @ A)
        se = float(np.sqrt(max(cov[0, 0], 0.0)))
    else:
        se = 0.0
    return float(coef[0]), se, float(coef[1])


def delta_default(d: int, p: float, q: float) -> float:
    """``1/2 - d/(2p) - 1/q``."""
    return 0.5 - d / (2 * p) - 1.0 / q


def verify_decay_estimates(solution: PDESolution, gaps, alpha: float | None = None,
                           component: int | None = None, floor: float | None = None,
                           noise: float = 1e-12) -> DecayReport:
    """Track ``sup_x |u(T - s)|`` and the Hölder seminorm of ``grad u(T - s)``
    along a ladder of gaps ``s`` and fit the decay exponent of the sup norm.

    Ladder points snap to the nearest time node.  ``alpha`` is the Hölder
    exponent for the gradient scan (default 1/2).  ``monotone`` reports
    whether ``sup|u|`` shrinks toward ``T`` up to ``noise``.
    """
    gaps = np.sort(np.asarray(gaps, dtype=float))[::-1]
    if len(gaps) < 3:
        raise ValueError("need at least 3 ladder points")
    g = solution.grid
    u = solution.u.values
    grad = solution.grad.values
    if component is not None:
        u = u[..., component]
        grad = grad[..., component, :]
    alpha = 0.5 if alpha is None else alpha
    sup_u, holder, times = [], [], []
    for s in gaps:
        k = int(np.clip(np.round((g.T - s - g.t0) / g.dt), 0, g.n_t - 1))
        times.append(g.times[k])
        sup_u.append(float(np.max(np.abs(u[k]))))
        level = GridFunction(g.with_time(g.t0, g.T, 2), np.stack([grad[k], grad[k]]))
        holder.append(holder_seminorm_estimate(level, alpha) if g.dim == 1 or np.prod(g.n_x) <= 10_000 else np.nan)
    times = np.array(times)
    sup_u = np.array(sup_u)
    real_gaps = g.T - times
    monotone = bool(np.all(np.diff(sup_u) <= noise * max(1.0, sup_u.max())))
    if np.all(sup_u <= noise):
        return DecayReport(times, real_gaps, sup_u, np.array(holder), None, None, None, monotone, floor)
    keep = (sup_u > noise) & (real_gaps > 0)
    slope, se, icpt = loglog_fit(real_gaps[keep], sup_u[keep])
    return DecayReport(times, real_gaps, sup_u, np.array(holder), slope, se, float(np.exp(icpt)), monotone, floor)


# ---------------------------------------------------------------------------
# Zvonkin window admissibility


def drift_problem(field: CoefficientField, domain: BoundedDomain, s0: float, t0: float) -> PDEProblem:
    """Vector problem with source ``b`` (one component per coordinate), zero boundary."""
    return PDEProblem(field, lambda t, x: np.asarray(field.drift(t, x), dtype=float), domain, t0, s0)


def window_grid(domain: BoundedDomain, s0: float, t0: float, n_x, dt: float) -> SpaceTimeGrid:
    n_t = max(3, int(np.ceil((t0 - s0) / dt - 1e-9)) + 1)
    return SpaceTimeGrid(domain, t0, n_t, tuple(np.atleast_1d(n_x)), s0)


def interpolant_lipschitz(u: GridFunction) -> float:
    """Upper bound on the spatial Lipschitz constant (operator norm) of the
    multilinear interpolant of a vector grid function ``u``.

    Within a cell each partial derivative of the interpolant is a convex
    combination of edge difference quotients, so the Jacobian's Frobenius
    norm is bounded by that of the cellwise maximal absolute quotients.
    """
    g = u.grid
    v = u.values
    if v.ndim == 1 + g.dim:
        v = v[..., None]
    d = g.dim
    bound_sq = 0.0
    cell_sq = None
    for i in range(d):
        q = np.abs(np.diff(v, axis=1 + i)) / g.dx[i]
        # max over the edges of each cell along the other axes
        for j in range(d):
            if j != i:
                q = np.maximum(np.take(q, np.arange(q.shape[1 + j] - 1), axis=1 + j),
                               np.take(q, np.arange(1, q.shape[1 + j]), axis=1 + j))
        sq = np.sum(q ** 2, axis=-1)
        cell_sq = sq if cell_sq is None else cell_sq + sq
    bound_sq = float(np.max(cell_sq))
    return float(np.sqrt(bound_sq))


def gradient_sup(solution: PDESolution) -> float:
    """Largest operator norm of the node gradient ``grad u`` over the grid."""
    G = solution.grad.values
    d = solution.grid.dim
    if G.ndim == 1 + d + 1:
        G = G[..., None, :]
    if G.shape[-2:] == (1, 1):
        return float(np.max(np.abs(G)))
    return float(np.max(np.linalg.norm(G, ord=2, axis=(-2, -1))))


def window_admissibility(solution: PDESolution) -> float:
    """Max of the node-gradient sup and the interpolant Lipschitz bound."""
    return max(gradient_sup(solution), interpolant_lipschitz(solution.u))


@dataclass
class WindowChoice:
    epsilon: float
    admissibility: float
    tested: list


def choose_window(field: CoefficientField, domain: BoundedDomain, T: float, n_x, dt: float,
                  drift_cap: float | None = None, probes: int = 3, iterations: int = 10,
                  target: float = 0.5, t_start: float = 0.0) -> WindowChoice:
    """Largest tested window length ``eps`` for which the drift problem on
    ``[s, s + eps]`` keeps ``|grad u| <= target`` at every probe start ``s``.

    Starts from the whole horizon and bisects.  ``drift_cap`` bounds the
    admissible ``L^q_p`` norm of the drift over ``(t_start, T) x D``.
    """
    span = T - t_start
    if drift_cap is not None:
        g = SpaceTimeGrid(domain, T, max(3, int(span / dt) + 1), tuple(np.atleast_1d(n_x)), t_start)
        norm = max(lqp_norm(lambda t, x, l=l: np.asarray(field.drift(t, x))[..., l], g, field.p, field.q)
                   for l in range(field.dim))
        if norm > drift_cap:
            raise WindowError(f"drift norm {norm:.4g} exceeds the cap {drift_cap:.4g}")
    tested = []

    def worst(eps):
        starts = [t_start] if field.autonomous else np.linspace(t_start, T - eps, probes)
        w = 0.0
        for s in starts:
            sol = solve_cauchy_dirichlet(drift_problem(field, domain, s, s + eps),
                                         window_grid(domain, s, s + eps, n_x, dt))
            w = max(w, window_admissibility(sol))
        tested.append((float(eps), w))
        return w

    w = worst(span)
    if w <= target:
        return WindowChoice(span, w, tested)
    good, good_w, bad = 0.0, None, span
    for _ in range(iterations):
        mid = 0.5 * (good + bad) if good > 0 else 0.5 * bad
        if mid < 4 * dt:
            break
        w = worst(mid)
        if w <= target:
            good, good_w = mid, w
        else:
            bad = mid
        if good > 0 and (bad - good) < 0.05 * good:
            break
    if good == 0.0 or good < 4 * dt:
        raise WindowError("no admissible window above 4*dt; refine the grid or reduce the drift")
    return WindowChoice(good, good_w, tested)
