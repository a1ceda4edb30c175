"""Monte Carlo checks of the Krylov, stability and exponential-moment estimates.

The theorems only assert that some constant exists, so every check fits a
constant from the data and tests exponent behaviour plus domination of the
whole ladder by one constant.  The constant is the largest ratio over the
upper half of the ladder (longest intervals, largest perturbations) and
domination is then tested on every rung with a 3 standard-error allowance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .fields import CoefficientField
from .geometry import BoundedDomain, SpaceTimeGrid, lqp_norm
from .pde import delta_default, loglog_fit
from .rng import derive_seed
from .simulate import PathBatch, simulate_paths, simulate_tied_pairs

log = logging.getLogger(__name__)


class VerificationError(ValueError):
    pass


def _upper_envelope(ratio: np.ndarray, order: np.ndarray) -> float:
    """Largest ratio over the upper half of the ladder (``order`` sorts the rungs ascending)."""
    top = order[len(order) // 2:]
    return float(np.max(ratio[top]))


def _norm_grid(domain: BoundedDomain, T: float, n_x: int, n_t: int, t0: float = 0.0) -> SpaceTimeGrid:
    return SpaceTimeGrid(domain, T, n_t, (n_x,) * domain.dim, t0)


# ---------------------------------------------------------------------------
# Krylov


@dataclass
class KrylovReport:
    intervals: list
    lhs: np.ndarray
    lhs_se: np.ndarray
    rhs: np.ndarray
    f_norm: float
    delta: float
    delta_hat: float
    delta_se: float
    c_hat: float
    dominated: bool
    passed: bool
    fit_skipped: bool = False
    restarts: list = dc_field(default_factory=list)
    restart_passed: bool = True

    def rows(self) -> list[dict]:
        return [dict(r=r, s=s, length=s - r, lhs=float(m), se=float(e), rhs=float(h))
                for (r, s), m, e, h in zip(self.intervals, self.lhs, self.lhs_se, self.rhs)]

    def summary(self) -> dict:
        return dict(delta=self.delta, delta_hat=self.delta_hat, delta_se=self.delta_se, c_hat=self.c_hat,
                    f_norm=self.f_norm, dominated=self.dominated, passed=self.passed,
                    fit_skipped=self.fit_skipped, restart_passed=self.restart_passed,
                    restarts=self.restarts)


def _steps(t: float, dt: float) -> int:
    k = round(t / dt)
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise VerificationError(f"time {t} is not a multiple of dt={dt}")
    return int(k)


def krylov_check(field: CoefficientField, f: Callable, domain: BoundedDomain, x0, intervals: Sequence,
                 p: float | None = None, q: float | None = None, delta: float | None = None,
                 paths: int = 10_000, dt: float = 1e-3, master_seed: int = 0,
                 restarts: int = 0, restart_paths: int = 200, norm_grid: tuple = (201, 101),
                 threads: int = 1) -> KrylovReport:
    """Estimate ``E int_{r ^ tau}^{s ^ tau} |f(t, X_t)| dt`` on a ladder of intervals.

    Parameters
    ----------
    f : callable
        ``f(t, x)`` with ``x`` of shape ``(n, d)`` returning ``(n,)``.
    intervals : sequence of (r, s)
        Interval lengths must strictly decrease along the sequence.
    delta : float, optional
        Exponent to test; defaults to ``1/2 - d/(2p) - 1/q``.
    restarts : int
        Number of states ``X_r`` (at the first interval's ``r``, or at the
        midpoint of the first interval when ``r = 0``) to restart
        ``restart_paths`` fresh sub-paths from, as a spot-check of the
        conditional form.  Each restart gets its own exponent fit and
        constant; the ratio of that constant to the unconditional one is
        reported, since the theorem's constant is uniform over start points
        while ``C_hat`` is fitted from ``x0`` only.  The restart noise uses
        a seed derived from ``master_seed``.
    """
    d = field.dim
    p = field.p if p is None else p
    q = field.q if q is None else q
    if not d / p + 2 / q < 2:
        raise VerificationError("Krylov runs need d/p + 2/q < 2")
    delta = delta_default(d, p, q) if delta is None else float(delta)
    intervals = [(float(r), float(s)) for r, s in intervals]
    lengths = np.array([s - r for r, s in intervals])
    if np.any(lengths <= 0) or np.any(np.diff(lengths) >= 0):
        raise VerificationError("interval lengths must be positive and strictly decreasing")
    T = max(s for _, s in intervals)
    rk = [_steps(r, dt) for r, _ in intervals]
    sk = [_steps(s, dt) for _, s in intervals]
    ladder = sorted(set(rk) | set(sk) | {0} | ({_steps(_restart_time(intervals, dt), dt)} if restarts else set()))
    pos = {k: i for i, k in enumerate(ladder)}

    def absf(t, x):
        return np.abs(np.asarray(f(t, x), dtype=float))

    batch = simulate_paths(field, x0, domain, T, dt, master_seed, paths, ladder=ladder,
                           integrand=absf, threads=threads)
    I = batch.integrals
    tau = np.nan_to_num(batch.exit_time, nan=np.inf)
    for r, _ in intervals:
        if r > 0 and not np.any(tau > r):
            raise VerificationError(f"every path left the domain before r={r}; enlarge D or reduce r")
    diff = np.stack([I[pos[b]] - I[pos[a]] for a, b in zip(rk, sk)])
    lhs = diff.mean(axis=1)
    se = diff.std(axis=1, ddof=1) / np.sqrt(batch.n_paths)
    nx, nt = norm_grid
    fnorm = lqp_norm(absf, _norm_grid(domain, T, nx, nt), p, q)

    if np.all(lhs == 0):
        rep = KrylovReport(intervals, lhs, se, np.zeros_like(lhs), fnorm, delta, np.nan, np.nan, 0.0,
                           True, True, fit_skipped=True)
        return rep
    keep = lhs > 0
    slope, slope_se, _ = loglog_fit(lengths[keep], lhs[keep])
    base = lengths ** delta * fnorm
    ratio = lhs / base
    c_hat = _upper_envelope(ratio, np.argsort(lengths))
    rhs = c_hat * base
    dominated = bool(np.all(lhs <= rhs + 3 * se))
    passed = bool(slope >= delta - slope_se and dominated)
    rep = KrylovReport(intervals, lhs, se, rhs, fnorm, delta, slope, slope_se, c_hat, dominated, passed)
    if restarts:
        _krylov_restarts(rep, field, absf, domain, batch, pos, dt, master_seed, restarts, restart_paths,
                         lengths, fnorm, threads)
    log.info("krylov: delta_hat=%.4f +- %.4f (delta=%.4f), C_hat=%.4g, pass=%s",
             slope, slope_se, delta, c_hat, passed)
    return rep


def _restart_time(intervals, dt: float) -> float:
    r0, s0 = intervals[0]
    return r0 if r0 > 0 else dt * round(0.5 * (r0 + s0) / dt)


def _krylov_restarts(rep: KrylovReport, field, absf, domain, batch, pos, dt, master_seed, k, m,
                     lengths, fnorm, threads):
    r_star = _restart_time(rep.intervals, dt)
    tau = np.nan_to_num(batch.exit_time, nan=np.inf)
    alive = np.flatnonzero(tau > r_star)
    if not alive.size:
        raise VerificationError(f"no path alive at the restart time {r_star}")
    states = batch.snapshots[pos[_steps(r_star, dt)]]
    pick = alive[np.linspace(0, alive.size - 1, min(k, alive.size)).round().astype(int)]
    seed = derive_seed(master_seed, 1)
    horizon = r_star + float(lengths[0])
    steps = sorted({_steps(ell, dt) for ell in lengths})
    ells = np.array(steps) * dt
    ok_all = True
    for j, i in enumerate(pick):
        x = states[i]
        sub = simulate_paths(field, np.broadcast_to(x, (m, field.dim)), domain, horizon, dt, seed,
                             np.arange(j * m, (j + 1) * m), ladder=[0] + steps, integrand=absf,
                             t0=r_star, threads=threads)
        vals = sub.integrals[1:]
        mean = vals.mean(axis=1)
        err = vals.std(axis=1, ddof=1) / np.sqrt(m)
        entry = dict(r=r_star, x=x.tolist(), lengths=ells.tolist(), lhs=mean.tolist(), se=err.tolist(),
                     above_unconditional=(mean > rep.c_hat * ells ** rep.delta * fnorm + 3 * err).tolist())
        if np.count_nonzero(mean > 0) >= 2:
            keep = mean > 0
            sl, sl_se, _ = loglog_fit(ells[keep], mean[keep])
            ratio = mean / (ells ** rep.delta * fnorm)
            c_x = _upper_envelope(ratio, np.arange(len(ells)))
            ok = bool(sl >= rep.delta - sl_se and np.all(mean <= c_x * ells ** rep.delta * fnorm + 3 * err))
            entry.update(delta_hat=sl, delta_se=sl_se, c_hat=c_x, c_ratio=c_x / rep.c_hat if rep.c_hat else np.inf)
        else:
            ok = True  # f vanishes along every restarted path
        entry["ok"] = ok
        ok_all &= ok
        rep.restarts.append(entry)
    rep.restart_passed = bool(ok_all)


# ---------------------------------------------------------------------------
# stability


@dataclass
class StabilityReport:
    eps: np.ndarray
    M: np.ndarray
    M_se: np.ndarray
    N: np.ndarray
    p0: float
    slope: float
    slope_se: float
    c_hat: float
    dominated: bool
    passed: bool
    M_zero: float | None
    kappa: float
    gronwall: np.ndarray | None = None
    gronwall_ok: bool | None = None
    slope_band: tuple = (0.8, 1.2)

    def rows(self) -> list[dict]:
        out = []
        for i, e in enumerate(self.eps):
            row = dict(eps=float(e), M=float(self.M[i]), se=float(self.M_se[i]), N=float(self.N[i]),
                       bound=float(self.c_hat * self.N[i]))
            if self.gronwall is not None:
                row["gronwall"] = float(self.gronwall[i])
            out.append(row)
        return out

    def summary(self) -> dict:
        return dict(p0=self.p0, slope=self.slope, slope_se=self.slope_se, c_hat=self.c_hat,
                    dominated=self.dominated, passed=self.passed, M_zero=self.M_zero, kappa=self.kappa,
                    gronwall_ok=self.gronwall_ok)


def _pert_norm(h: Callable | None, grid: SpaceTimeGrid, p: float, q: float, matrix: bool) -> float:
    if h is None:
        return 0.0

    def mag(t, x):
        v = np.asarray(h(t, x), dtype=float)
        axes = (-2, -1) if matrix else (-1,)
        return np.sqrt(np.sum(v * v, axis=axes))

    return lqp_norm(mag, grid, p, q)


def stability_check(base: CoefficientField, h_drift: Callable | None, h_diffusion: Callable | None,
                    eps: Sequence[float], domain: BoundedDomain, x0, T: float, dt: float,
                    paths: int = 10_000, p0: float = 1.0, master_seed: int = 0, kappa: float | None = None,
                    include_zero: bool = True, norm_grid: tuple = (201, 101), threads: int = 1,
                    slope_band: tuple = (0.8, 1.2)) -> StabilityReport:
    """Tied pairs ``(b, sigma)`` vs ``(b + eps h_b, sigma + eps h_sigma)`` along an ``eps`` ladder.

    ``M(eps) = E sup_{t <= T ^ tau} |X - X'|^p0`` and
    ``N(eps) = (||eps h_b|| + ||eps h_sigma||)^p0`` in ``L^q_p((0, T) x D)``.
    Passes iff the log-log slope of ``M`` against ``N`` lies in
    ``slope_band`` and one constant dominates every rung.

    ``kappa``, when given, must bound the ellipticity of every perturbed
    field on the domain; otherwise the smallest admissible value is
    estimated and only non-degeneracy is required.
    """
    from .geometry import ellipticity_check

    eps = np.asarray(sorted(float(e) for e in eps))
    if eps.size < 2 or eps[0] <= 0:
        raise VerificationError("need at least two positive perturbation sizes")
    if h_drift is None and h_diffusion is None:
        raise VerificationError("need a drift or diffusion direction")
    if base.hypothesis_value() >= 1:
        log.warning("d/p + 2/q = %.3f >= 1: outside the stability hypothesis", base.hypothesis_value())
    nx, nt = norm_grid
    grid = _norm_grid(domain, T, nx, nt)
    egrid = _norm_grid(domain, T, min(nx, 51), min(nt, 11))
    kap = []
    fields = []
    for e in eps:
        pert = base.perturbed(e, h_drift, h_diffusion)
        if kappa is None:
            rep = ellipticity_check(pert, egrid, samples=10 ** 9)
            if rep.min_eigenvalue <= 1e-12:
                raise VerificationError(f"perturbed diffusion degenerates at eps={e}")
            k = max(base.kappa, rep.max_eigenvalue, 1.0 / rep.min_eigenvalue) * (1 + 1e-9)
        else:
            k = kappa
        pert = base.perturbed(e, h_drift, h_diffusion, kappa=k)
        if not ellipticity_check(pert, egrid, samples=10 ** 9).passed:
            raise VerificationError(f"perturbed field at eps={e} violates ellipticity with kappa={k}")
        kap.append(k)
        fields.append(pert)
    nb_ = _pert_norm(h_drift, grid, base.p, base.q, matrix=False)
    ns_ = _pert_norm(h_diffusion, grid, base.p, base.q, matrix=True)
    N = (eps * (nb_ + ns_)) ** p0

    M, M_se, worst = np.empty(len(eps)), np.empty(len(eps)), np.empty(len(eps))
    for i, pert in enumerate(fields):
        a, _ = simulate_tied_pairs(base, pert, x0, domain, T, dt, master_seed, paths, threads=threads)
        if np.mean(a.exit_index == 1) > 0.5:
            raise VerificationError(f"more than half the pairs exit at the first step (eps={eps[i]})")
        g = a.integrals[-1] ** p0
        M[i] = g.mean()
        M_se[i] = g.std(ddof=1) / np.sqrt(len(g))
        worst[i] = g.max()
    m_zero = None
    if include_zero:
        a, _ = simulate_tied_pairs(base, base, x0, domain, T, dt, master_seed, paths, threads=threads)
        m_zero = float(np.mean(a.integrals[-1] ** p0))
    slope, slope_se, _ = loglog_fit(N, M)
    ratio = M / N
    c_hat = _upper_envelope(ratio, np.argsort(eps))
    dominated = bool(np.all(M <= c_hat * N + 3 * M_se))
    passed = bool(slope_band[0] <= slope <= slope_band[1] and dominated and (m_zero in (None, 0.0)))
    gron = gron_ok = None
    if h_diffusion is None and base.lipschitz is not None:
        hs = sup_magnitude(h_drift, grid)
        gron = (np.exp(base.lipschitz * T) * T * eps * hs) ** p0
        gron_ok = bool(np.all(worst <= gron * (1 + 1e-12)))
    rep = StabilityReport(eps, M, M_se, N, p0, slope, slope_se, c_hat, dominated, passed, m_zero,
                          max(kap), gron, gron_ok, tuple(slope_band))
    log.info("stability: slope=%.3f +- %.3f, C_hat=%.4g, pass=%s", slope, slope_se, c_hat, passed)
    return rep


def sup_magnitude(h: Callable, grid: SpaceTimeGrid) -> float:
    """Largest ``|h(t, x)|`` over the grid nodes."""
    x = grid.nodes().reshape(-1, grid.dim)
    return float(max(np.max(np.linalg.norm(np.asarray(h(t, x), dtype=float), axis=-1)) for t in grid.times))


# ---------------------------------------------------------------------------
# exponential moments


@dataclass
class ExponentialMomentReport:
    kappa0: float
    rho: list
    lambdas: list
    sizes: list
    estimates: dict
    stable: dict
    passed: bool

    def rows(self) -> list[dict]:
        return [dict(lam=lam, size=n, estimate=self.estimates[lam][j])
                for lam in self.lambdas for j, n in enumerate(self.sizes)]

    def summary(self) -> dict:
        return dict(kappa0=self.kappa0, passed=self.passed, stable={str(k): v for k, v in self.stable.items()},
                    rho=self.rho)


def exponential_moment_check(paths, lambdas: Sequence[float], kappa0: float | None = None,
                             sizes: Sequence[int] = (1_000, 10_000, 100_000),
                             tolerance: float = 0.10) -> ExponentialMomentReport:
    """Running means of ``exp(lam int_0^{T ^ tau} beta)`` at growing sample sizes.

    ``paths`` is a :class:`PathBatch` simulated with ``integrand = beta`` and
    a ladder of time points (the last one is the horizon).  ``rho(s, t)``,
    the mean of ``int_s^t beta`` over ladder windows, is estimated for every
    window length; ``kappa0`` defaults to the largest ``rho`` over the
    shortest windows.  Only ``lam < 1/kappa0`` are tested.  A ``lam``
    passes when the relative change between the last two sample sizes is
    below ``tolerance``.
    """
    if isinstance(paths, PathBatch):
        if paths.integrals is None:
            raise VerificationError("batch carries no path integrals; simulate with an integrand")
        I = np.asarray(paths.integrals, dtype=float)
    else:
        I = np.atleast_2d(np.asarray(paths, dtype=float))
    if np.any(np.diff(I, axis=0) < -1e-12 * np.maximum(1.0, np.abs(I[1:]))):
        raise VerificationError("running integral decreases: beta < 0 observed")
    n = I.shape[1]
    rho = []
    L = I.shape[0]
    for w in range(1, L):
        means = (I[w:] - I[:-w]).mean(axis=1)
        rho.append(float(means.max()))
    k0 = (rho[0] if rho else 0.0) if kappa0 is None else float(kappa0)
    limit = np.inf if k0 == 0 else 1.0 / k0
    lams = [float(l) for l in lambdas]
    if any(l >= limit for l in lams):
        raise VerificationError(f"lambda must stay below 1/kappa0 = {limit:.4g}")
    use = [int(s) for s in sizes if s <= n]
    if len(use) < 2:
        raise VerificationError(f"need at least {sorted(sizes)[1]} paths for two sample sizes")
    final = I[-1]
    est, stable = {}, {}
    for lam in lams:
        vals = np.exp(lam * final)
        est[lam] = [float(vals[:s].mean()) for s in use]
        a, b = est[lam][-2], est[lam][-1]
        stable[lam] = bool(np.isfinite(b) and abs(b - a) <= tolerance * abs(b))
    return ExponentialMomentReport(k0, rho, lams, use, est, stable, all(stable.values()))
