"""Zvonkin transform ``Phi(t, x) = x + u(t, x)`` that removes the drift.

On a window ``[s0, t0]`` the vector ``u`` solves the backward problem with
source ``b`` (one component per coordinate), zero boundary values and
``u(t0) = 0``.  When ``|grad u| <= 1/2`` the map ``Phi(t, .)`` is
bi-Lipschitz with constants 1/2 and 3/2, ``y - u(t, .)`` is a contraction,
and ``Y = Phi(t, X)`` solves ``dY = Theta(t, Y) dB`` with
``Theta = ((I + grad u) sigma)(t, Phi^{-1}(t, Y))``.

``u`` is extended by zero outside the box; since it vanishes on the
boundary, this is the same as clamping queries to the box.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .fields import CoefficientField
from .geometry import BoundedDomain, GridFunction, SpaceTimeGrid
from .pde import (
    PDESolution,
    choose_window,
    drift_problem,
    gradient_sup,
    interpolant_lipschitz,
    solve_cauchy_dirichlet,
    window_grid,
)
from .rng import RNGStreamSpec
from .simulate import PathBatch, PathSample, _as_starts, _box_outside, _indices, diffuse, march, step_count

log = logging.getLogger(__name__)

MAX_ITER = 60


class TransformError(RuntimeError):
    """Inadmissible window, failed audit or failed inversion."""


def spatial_interp(values: np.ndarray, lo: np.ndarray, dx: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of node ``values`` (shape ``(*n_x, *comp)``)
    at points ``x`` (shape ``(n, d)``), with queries clamped to the box."""
    d = len(lo)
    n_x = values.shape[:d]
    comp = values.shape[d:]
    if d == 1:
        xs = lo[0] + dx[0] * np.arange(n_x[0])
        flat = values.reshape(n_x[0], -1)
        cols = [np.interp(x[:, 0], xs, flat[:, c]) for c in range(flat.shape[1])]
        return np.stack(cols, axis=-1).reshape((len(x),) + comp)
    idx, wts = [], []
    for a in range(d):
        s = np.clip((x[:, a] - lo[a]) / dx[a], 0.0, n_x[a] - 1)
        i = np.minimum(np.floor(s).astype(int), n_x[a] - 2)
        idx.append(i)
        wts.append(s - i)
    out = np.zeros((len(x),) + comp)
    for corner in np.ndindex(*(2,) * d):
        w = np.ones(len(x))
        for a in range(d):
            w = w * (wts[a] if corner[a] else 1.0 - wts[a])
        v = values[tuple(idx[a] + corner[a] for a in range(d))]
        out = out + w.reshape((-1,) + (1,) * len(comp)) * v
    return out


@dataclass
class BiLipschitzAudit:
    pairs: int
    min_ratio: float
    max_ratio: float
    tolerance: float
    passed: bool
    worst: tuple | None = None


@dataclass
class EllipticityAudit:
    samples: int
    min_eigenvalue: float
    max_eigenvalue: float
    kappa: float
    rigorous_band: tuple
    nominal_band: tuple
    passed: bool
    nominal_passed: bool


@dataclass(eq=False)
class TransformBundle:
    """Zvonkin data on one window.

    ``u`` has values of shape ``(n_t, *n_x, d)``; ``grad_u`` has shape
    ``(n_t, *n_x, d, d)`` with ``grad_u[..., l, i] = d_i u^l``.
    """

    field: CoefficientField
    domain: BoundedDomain
    u: GridFunction
    grad_u: GridFunction
    tol: float = 1e-12
    admissibility: float = 0.0
    audit: BiLipschitzAudit | None = None
    solution: PDESolution | None = None
    _cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.u.grid

    @property
    def window(self) -> tuple:
        return (self.grid.t0, self.grid.T)

    def _level(self, t: float):
        c = self._cache
        if c.get("t") == t:
            return c["u"], c["g"]
        g = self.grid
        s = (t - g.t0) / g.dt
        if s < -1e-9 or s > g.n_t - 1 + 1e-9:
            raise TransformError(f"time {t} outside the window {self.window}")
        r = round(s)
        if abs(s - r) < 1e-9:
            U, G = self.u.values[int(r)], self.grad_u.values[int(r)]
        else:
            k = min(int(np.floor(s)), g.n_t - 2)
            w = s - k
            U = (1 - w) * self.u.values[k] + w * self.u.values[k + 1]
            G = (1 - w) * self.grad_u.values[k] + w * self.grad_u.values[k + 1]
        c.update(t=t, u=U, g=G)
        return U, G

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, self.grid.dim), x.shape

    def u_at(self, t: float, x) -> np.ndarray:
        pts, shape = self._points(x)
        U, _ = self._level(t)
        g = self.grid
        return spatial_interp(U, g.domain.lo_array, g.dx, pts).reshape(shape)

    def grad_at(self, t: float, x) -> np.ndarray:
        pts, shape = self._points(x)
        _, G = self._level(t)
        g = self.grid
        d = g.dim
        return spatial_interp(G, g.domain.lo_array, g.dx, pts).reshape(shape[:-1] + (d, d))

    def phi(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.u_at(t, x)

    def jacobian(self, t: float, x) -> np.ndarray:
        d = self.grid.dim
        return np.eye(d) + self.grad_at(t, x)

    def invert(self, t: float, y, return_iterations: bool = False, trace: bool = False):
        """Fixed-point inverse ``x_{k+1} = y - u(t, x_k)`` from ``x_0 = y``.

        Each point stops at its own first step below ``tol``.  Raises
        :class:`TransformError` after 60 iterations or if a converged
        preimage of a point in the box lies outside the box.
        """
        y = np.asarray(y, dtype=float)
        pts, shape = self._points(y)
        U, _ = self._level(t)
        g = self.grid
        lo, dx = g.domain.lo_array, g.dx
        x = pts.copy()
        iters = np.zeros(len(pts), dtype=int)
        active = np.arange(len(pts))
        gaps = []
        for it in range(1, MAX_ITER + 1):
            xa = x[active]
            new = pts[active] - spatial_interp(U, lo, dx, xa)
            step = np.max(np.abs(new - xa), axis=-1)
            x[active] = new
            gaps.append(float(step.max()))
            done = step < self.tol
            iters[active[done]] = it
            active = active[~done]
            if not active.size:
                break
        if active.size:
            raise TransformError(f"inversion did not converge in {MAX_ITER} iterations at y={pts[active[0]]}")
        box_lo, box_hi = g.domain.lo_array, g.domain.hi_array
        inside_y = np.all((pts >= box_lo) & (pts <= box_hi), axis=-1)
        slack = 1e-9 * (box_hi - box_lo)
        outside_x = np.any((x < box_lo - slack) | (x > box_hi + slack), axis=-1)
        if np.any(inside_y & outside_x):
            raise TransformError("preimage left the box; the image audit failed")
        out = x.reshape(shape)
        if trace:
            return out, iters, np.array(gaps)  # largest successive-iterate gap per sweep
        return (out, iters) if return_iterations else out

    def theta(self, t: float, y) -> np.ndarray:
        """Transformed diffusion ``((I + grad u) sigma)(t, Phi^{-1}(t, y))``."""
        x = self.invert(t, y)
        return self.theta_at_preimage(t, x)

    def theta_at_preimage(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = np.asarray(self.field.diffusion(t, x), dtype=float)
        G = self.grad_at(t, x)
        return s + np.matmul(G, s)


def audit_bilipschitz(bundle: TransformBundle, pairs: int = 1000, seed: int = 0,
                      tol: float = 1e-12) -> BiLipschitzAudit:
    """Check ``|x - y|/2 <= |Phi x - Phi y| <= 3|x - y|/2`` on random pairs.

    Half the pairs are grid nodes, half are uniform points in the box, each
    pair at a random time node.  ``tol`` is relative slack for roundoff;
    the interpolant's Lipschitz bound makes the inequality exact otherwise.
    """
    g = bundle.grid
    rng = np.random.default_rng(seed)
    lo, hi = g.domain.lo_array, g.domain.hi_array
    d = g.dim
    half = pairs // 2
    node_idx = [rng.integers(0, n, size=(half, 2)) for n in g.n_x]
    nodes = np.stack([lo[a] + g.dx[a] * node_idx[a] for a in range(d)], axis=-1)  # (half, 2, d)
    free = lo + (hi - lo) * rng.uniform(size=(pairs - half, 2, d))
    P = np.concatenate([nodes, free])
    times = g.times[rng.integers(0, g.n_t, size=pairs)]
    lo_r, hi_r, worst = np.inf, 0.0, None
    for t in np.unique(times):
        sel = times == t
        a, b = P[sel, 0], P[sel, 1]
        dist = np.linalg.norm(a - b, axis=-1)
        ok = dist > 0
        ratio = np.linalg.norm(bundle.phi(t, a) - bundle.phi(t, b), axis=-1)[ok] / dist[ok]
        if ratio.size:
            if ratio.min() < lo_r:
                lo_r = float(ratio.min())
                worst = (float(t), a[ok][ratio.argmin()].tolist(), b[ok][ratio.argmin()].tolist())
            hi_r = max(hi_r, float(ratio.max()))
    passed = lo_r >= 0.5 * (1 - tol) and hi_r <= 1.5 * (1 + tol)
    return BiLipschitzAudit(pairs, lo_r, hi_r, tol, passed, worst)


def bundle_from_u(field: CoefficientField, domain: BoundedDomain, u: GridFunction, tol: float = 1e-12,
                  solution: PDESolution | None = None, audit_pairs: int = 1000, seed: int = 0) -> TransformBundle:
    """Assemble and audit a bundle from a tabulated vector ``u``.

    Raises :class:`TransformError` if ``|grad u| > 1/2`` (node gradient or
    interpolant Lipschitz bound) or the bi-Lipschitz audit fails.
    """
    from .pde import gradient_hessian

    vals = u.values
    d = u.grid.dim
    if vals.ndim == 1 + d:
        u = GridFunction(u.grid, vals[..., None], u.name)
    grad, _ = gradient_hessian(u) if solution is None else (solution.grad, None)
    if grad.values.ndim == 1 + d + 1:
        grad = GridFunction(grad.grid, grad.values[..., None, :], grad.name)
    proxy = PDESolution(u, grad, grad, np.zeros(1))
    adm = max(gradient_sup(proxy), interpolant_lipschitz(u))
    if adm > 0.5:
        raise TransformError(f"sup |grad u| = {adm:.4f} > 1/2: window too long, shorten it (see choose_window)")
    b = TransformBundle(field, domain, u, grad, tol, adm, None, solution)
    b.audit = audit_bilipschitz(b, audit_pairs, seed)
    if not b.audit.passed:
        raise TransformError(f"bi-Lipschitz audit failed: ratios in [{b.audit.min_ratio}, {b.audit.max_ratio}]")
    return b


def build_transform(field: CoefficientField, domain: BoundedDomain, window: tuple, n_x=161,
                    dt: float = 1e-3, tol: float = 1e-12, audit_pairs: int = 1000, seed: int = 0) -> TransformBundle:
    """Solve the drift problem on ``window = (s0, t0)`` and build the audited bundle."""
    s0, t0 = window
    sol = solve_cauchy_dirichlet(drift_problem(field, domain, s0, t0), window_grid(domain, s0, t0, n_x, dt))
    return bundle_from_u(field, domain, sol.u, tol, sol, audit_pairs, seed)


def invert_transform(bundle: TransformBundle, t: float, y) -> np.ndarray:
    """``Phi^{-1}(t, y)`` by the contracting fixed-point iteration."""
    return bundle.invert(t, y)


def transformed_diffusion(bundle: TransformBundle, field: CoefficientField | None = None) -> Callable:
    """Evaluator ``Theta(t, y)`` returning ``(n, d, d)`` matrices."""
    if field is not None and field is not bundle.field:
        bundle = TransformBundle(field, bundle.domain, bundle.u, bundle.grad_u, bundle.tol,
                                 bundle.admissibility, bundle.audit, bundle.solution)
    return bundle.theta


def audit_theta_ellipticity(bundle: TransformBundle, samples: int = 2000, seed: int = 0) -> EllipticityAudit:
    """Eigenvalues of ``Theta Theta^T`` on random points of the image box.

    With singular values of ``I + grad u`` in ``[1/2, 3/2]`` the guaranteed
    band is ``[1/(4 kappa), 9 kappa / 4]``; the tighter nominal band
    ``[1/(2.25 kappa), 2.25 kappa]`` is reported alongside.
    """
    g = bundle.grid
    rng = np.random.default_rng(seed)
    lo, hi = g.domain.lo_array, g.domain.hi_array
    y = lo + (hi - lo) * rng.uniform(size=(samples, g.dim))
    ts = g.times[rng.integers(0, g.n_t, size=samples)]
    lam_lo, lam_hi = np.inf, 0.0
    for t in np.unique(ts):
        sel = ts == t
        th = bundle.theta(t, y[sel])
        ev = np.linalg.eigvalsh(th @ np.swapaxes(th, -1, -2))
        lam_lo = min(lam_lo, float(ev.min()))
        lam_hi = max(lam_hi, float(ev.max()))
    k = bundle.field.kappa
    rig = (1 / (4 * k), 2.25 * k)
    nom = (1 / (2.25 * k), 2.25 * k)
    return EllipticityAudit(samples, lam_lo, lam_hi, k, rig, nom,
                            rig[0] <= lam_lo and lam_hi <= rig[1], nom[0] <= lam_lo and lam_hi <= nom[1])


@dataclass
class ZvonkinRun:
    windows: list
    epsilon: float
    admissibility: list
    audits: list
    max_iterations: int


def plan_windows(field: CoefficientField, domain: BoundedDomain, T: float, dt: float, n_x=161,
                 epsilon: float | None = None) -> list[tuple[int, int]]:
    """Step ranges ``[k0, k1)`` of consecutive admissible windows covering ``[0, T]``."""
    n = step_count(T, dt)
    if epsilon is None:
        epsilon = choose_window(field, domain, T, n_x, dt).epsilon
    m = max(1, int(np.floor(epsilon / dt + 1e-9)))
    return [(k, min(k + m, n)) for k in range(0, n, m)]


def simulate_via_zvonkin_batch(field: CoefficientField, x0, domain: BoundedDomain, T: float, dt: float,
                               master_seed: int, paths=1000, n_x=161, epsilon: float | None = None,
                               record: bool = False, tol: float = 1e-12) -> tuple[PathBatch, ZvonkinRun]:
    """Simulate ``X = Phi^{-1}(Y)`` with ``dY = Theta dB`` window by window.

    Per window: ``Y = Phi(s0, X)``; Euler steps ``Y + Theta(t, Y) sqrt(dt) xi``
    with the same stream addresses as the direct scheme; the path stops at
    the first step with ``Y`` outside the box (``Phi`` fixes the boundary,
    so this is the first step with ``X`` outside).  ``u(t0) = 0`` makes
    ``X = Y`` at every window end.
    """
    idx = _indices(paths)
    n = len(idx)
    d = field.dim
    n_steps = step_count(T, dt)
    plan = plan_windows(field, domain, T, dt, n_x, epsilon)
    X = _as_starts(x0, n, d)
    exit_index = np.full(n, -1, dtype=np.int64)
    blown = np.zeros(n, dtype=bool)
    traj = np.full((n_steps + 1, n, d), np.nan) if record else None
    if record:
        traj[0] = X
    outside = _box_outside(domain)
    if np.any(outside(X[None])):
        raise TransformError("start point outside the domain")
    live = np.arange(n)
    adm, audits, max_it = [], [], 0
    sq = float(np.sqrt(dt))
    for k0, k1 in plan:
        if not live.size:
            break
        s0, t0 = k0 * dt, k1 * dt
        bundle = build_transform(field, domain, (s0, t0), n_x, dt, tol, seed=k0)
        adm.append(bundle.admissibility)
        audits.append(bundle.audit)
        iters = [0]

        def step(t, S, xi, bundle=bundle, iters=iters):
            y = S[0]
            x, it = bundle.invert(t, y, return_iterations=True)
            iters[0] = max(iters[0], int(it.max()) if it.size else 0)
            th = bundle.theta_at_preimage(t, x)
            return (y + diffuse(th, xi) * sq)[None]

        Y0 = bundle.phi(s0, X[live])
        res = march(step, outside, Y0[None], master_seed, idx[live], dt, k1 - k0, s0, k0,
                    None, None, record)
        max_it = max(max_it, iters[0])
        Yend = res["terminal"][0]
        gone = res["exit_index"] >= 0
        Xend = Yend.copy()
        fin = gone & np.all(np.isfinite(Yend), axis=-1)
        if fin.any():
            # stopped paths report the preimage of their first outside state
            Xend[fin] = _invert_each(bundle, s0, dt, res["exit_index"][fin], Yend[fin])
        if record:
            tr = res["trajectories"][:, 0]  # (k1 - k0 + 1, n_live, d)
            for j in range(1, k1 - k0 + 1):
                alive_j = np.all(np.isfinite(tr[j]), axis=-1)
                if alive_j.any():
                    traj[k0 + j, live[alive_j]] = bundle.invert(s0 + j * dt, tr[j, alive_j])
        X[live] = Xend
        exit_index[live[gone]] = k0 + res["exit_index"][gone]
        blown[live[gone]] = res["blown_up"][gone]
        live = live[~gone]
    batch = PathBatch(master_seed, idx, dt, 0.0, n_steps, exit_index, blown, X,
                      np.array([n_steps]), X[None].copy(), None, traj)
    eps = (plan[0][1] - plan[0][0]) * dt
    return batch, ZvonkinRun(plan, eps, adm, audits, max_it)


def _invert_each(bundle, s0, dt, steps, Y):
    out = np.empty_like(Y)
    for k in np.unique(steps):
        sel = steps == k
        out[sel] = bundle.invert(s0 + k * dt, Y[sel])
    return out


def simulate_via_zvonkin(field: CoefficientField, x0, domain: BoundedDomain, T: float, dt: float,
                         stream: RNGStreamSpec, **kw) -> PathSample:
    batch, _ = simulate_via_zvonkin_batch(field, x0, domain, T, dt, stream.master_seed,
                                          [stream.path_index], record=True, **kw)
    return batch.path(0)
