"""Euler-Maruyama simulation stopped at the first grid exit from a box.

All simulators share one marching loop over a batch of paths.  Step ``k``
(time ``t0 + k*dt``) of path ``i`` consumes variates ``k*d .. k*d + d - 1``
of the stream keyed by ``(master_seed, i)``, so results do not depend on
batch composition, chunking across threads, or where a path stops.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .fields import CoefficientField
from .geometry import BoundedDomain
from .rng import RNGStreamSpec, normals_block, stream_keys

BLOCK = 64


class SimulationError(ValueError):
    """Invalid simulation request (not a path outcome)."""


def step_count(T: float, dt: float, t0: float = 0.0) -> int:
    n = int(round((T - t0) / dt))
    if n < 1 or abs(n * dt - (T - t0)) > 1e-9 * max(1.0, abs(T - t0)):
        raise SimulationError(f"dt = {dt} does not divide the horizon {T - t0}")
    return n


def diffuse(s: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``sigma @ xi`` per path (shared by every stepper so roundoff agrees)."""
    if s.shape[-1] == 1:
        return s[..., 0] * xi
    return np.matmul(s, xi[..., None])[..., 0]


def em_step(field: CoefficientField, t: float, x: np.ndarray, xi: np.ndarray, dt: float, sq: float) -> np.ndarray:
    b = np.asarray(field.drift(t, x), dtype=float)
    s = np.asarray(field.diffusion(t, x), dtype=float)
    return x + b * dt + diffuse(s, xi) * sq


@dataclass
class PathSample:
    """One trajectory up to (and including) its first observed exit."""

    times: np.ndarray
    states: np.ndarray
    exit_time: float | None
    exited: bool
    stream: RNGStreamSpec
    dt: float
    blown_up: bool = False

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class PathBatch:
    """Outcome of a batch of paths.

    ``exit_index[i]`` is the first step whose state lies outside the domain
    (``-1`` if none before ``T``).  ``snapshots`` and ``integrals`` hold the
    stopped state ``X(t ^ tau)`` and ``int_0^{t ^ tau} f(s, X_s) ds`` at the
    ``ladder`` step indices.
    """

    master_seed: int
    path_indices: np.ndarray
    dt: float
    t0: float
    n_steps: int
    exit_index: np.ndarray
    blown_up: np.ndarray
    terminal: np.ndarray
    ladder: np.ndarray
    snapshots: np.ndarray
    integrals: np.ndarray | None = None
    trajectories: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.path_indices)

    @property
    def exited(self) -> np.ndarray:
        return self.exit_index >= 0

    @property
    def exit_time(self) -> np.ndarray:
        """Exit times with ``nan`` for paths alive at the horizon."""
        return np.where(self.exited, self.t0 + self.exit_index * self.dt, np.nan)

    @property
    def ladder_times(self) -> np.ndarray:
        return self.t0 + self.ladder * self.dt

    def path(self, i: int) -> PathSample:
        if self.trajectories is None:
            raise SimulationError("batch was run without record=True")
        last = self.exit_index[i] if self.exit_index[i] >= 0 else self.n_steps
        times = self.t0 + np.arange(last + 1) * self.dt
        return PathSample(times, self.trajectories[: last + 1, i].copy(),
                          float(times[-1]) if self.exit_index[i] >= 0 else None,
                          bool(self.exit_index[i] >= 0),
                          RNGStreamSpec(self.master_seed, int(self.path_indices[i])), self.dt,
                          bool(self.blown_up[i]))


def _as_starts(x0, n: int, d: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        return np.broadcast_to(x0.reshape(d), (n, d)).copy()
    if x0.shape != (n, d):
        raise SimulationError(f"start array has shape {x0.shape}, expected {(n, d)}")
    return x0.copy()


def march(step: Callable, outside: Callable, starts: np.ndarray, master_seed: int,
          path_indices: np.ndarray, dt: float, n_steps: int, t0: float = 0.0,
          step_offset: int = 0, ladder=None, integrand: Callable | None = None,
          record: bool = False, monitor: Callable | None = None) -> dict:
    """Generic stopped march of ``m`` coupled states per path.

    ``starts`` has shape ``(m, n, d)``; ``step(t, S, xi)`` maps live states
    ``(m, n_live, d)`` to their successors; ``outside(S)`` flags paths to stop.
    ``monitor(k, live, S)`` sees every new level (for nested-domain bookkeeping).
    The noise for step ``k`` is addressed at stream step ``step_offset + k``.
    """
    m, n, d = starts.shape
    keys = stream_keys(master_seed, path_indices)
    ladder = np.array(sorted(set(int(k) for k in (ladder if ladder is not None else [n_steps]))), dtype=int)
    if ladder.size and (ladder[0] < 0 or ladder[-1] > n_steps):
        raise SimulationError("ladder step outside [0, n_steps]")
    S_all = starts.copy()
    exit_index = np.full(n, -1, dtype=np.int64)
    blown = np.zeros(n, dtype=bool)
    snaps = np.empty((len(ladder), m, n, d))
    I_all = np.zeros(n) if integrand is not None else None
    ints = np.empty((len(ladder), n)) if integrand is not None else None
    traj = None
    if record:
        traj = np.full((n_steps + 1, m, n, d), np.nan)
        traj[0] = starts

    bad0 = outside(starts)
    if np.any(bad0):
        raise SimulationError(f"start point outside the domain for path {int(path_indices[np.argmax(bad0)])}")
    live = np.arange(n)
    S = S_all[:, live]
    f_prev = I = None
    if integrand is not None:
        f_prev = np.asarray(integrand(t0, S[0]), dtype=float)
        I = I_all[live]
    li = 0
    while li < len(ladder) and ladder[li] == 0:
        snaps[li] = S_all
        if ints is not None:
            ints[li] = I_all
        li += 1

    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while k < n_steps and live.size:
            B = min(BLOCK, n_steps - k)
            Z = normals_block(keys[live], step_offset + k, B, d)
            pos = np.arange(live.size)
            for j in range(B):
                t = t0 + (k + j) * dt
                S = step(t, S, Z[j, pos])
                kk = k + j + 1
                t_new = t0 + kk * dt
                out = outside(S)  # NaN compares false, so non-finite states are outside
                if integrand is not None:
                    f_new = np.asarray(integrand(t_new, S[0]), dtype=float)
                    I = I + 0.5 * dt * (f_prev + f_new)
                    f_prev = f_new
                if monitor is not None:
                    monitor(kk, live, S)
                if record:
                    traj[kk][:, live] = S
                if np.any(out):
                    gone = live[out]
                    exit_index[gone] = kk
                    blown[gone] = ~np.all(np.isfinite(S[:, out]), axis=(0, 2))
                    S_all[:, gone] = S[:, out]
                    if integrand is not None:
                        I_all[gone] = I[out]
                        I, f_prev = I[~out], f_prev[~out]
                    keep = ~out
                    live, S, pos = live[keep], S[:, keep], pos[keep]
                while li < len(ladder) and ladder[li] == kk:
                    S_all[:, live] = S
                    snaps[li] = S_all
                    if ints is not None:
                        I_all[live] = I
                        ints[li] = I_all
                    li += 1
                if not live.size:
                    break
            k += B
    S_all[:, live] = S
    if integrand is not None:
        I_all[live] = I
    while li < len(ladder):  # everything stopped before these ladder points
        snaps[li] = S_all
        if ints is not None:
            ints[li] = I_all
        li += 1
    return dict(exit_index=exit_index, blown_up=blown, terminal=S_all, ladder=ladder,
                snapshots=snaps, integrals=ints, trajectories=traj)


def _box_outside(domain: BoundedDomain):
    lo, hi = domain.lo_array, domain.hi_array

    if len(lo) == 1:
        a, b = float(lo[0]), float(hi[0])

        def outside(S):
            x = S[..., 0]
            inside = (x > a) & (x < b)
            return ~(inside[0] if len(S) == 1 else np.all(inside, axis=0))

        return outside

    def outside(S):
        return ~np.all((S > lo) & (S < hi), axis=(0, 2))

    return outside


def _indices(paths) -> np.ndarray:
    if np.isscalar(paths):
        return np.arange(int(paths), dtype=np.int64)
    return np.asarray(paths, dtype=np.int64)


def _chunked(fn, idx: np.ndarray, threads: int):
    """Run ``fn(sub_indices, offset)`` over ordered chunks and concatenate."""
    if threads <= 1 or len(idx) < 2 * threads:
        return [fn(idx, 0)]
    bounds = np.linspace(0, len(idx), threads + 1).astype(int)
    parts = [(idx[a:b], a) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda p: fn(*p), parts))


def _merge(results: list[dict]) -> dict:
    if len(results) == 1:
        return results[0]
    out = {}
    axis_map = dict(exit_index=0, blown_up=0, terminal=1, snapshots=2, integrals=1, trajectories=2)
    for key, axis in axis_map.items():
        vals = [r[key] for r in results]
        out[key] = None if vals[0] is None else np.concatenate(vals, axis=axis)
    out["ladder"] = results[0]["ladder"]
    return out


def _batch(res: dict, member: int, seed: int, idx, dt, t0, n_steps) -> PathBatch:
    tr = res["trajectories"]
    return PathBatch(seed, idx, dt, t0, n_steps, res["exit_index"], res["blown_up"],
                     res["terminal"][member], res["ladder"], res["snapshots"][:, member],
                     res["integrals"], None if tr is None else tr[:, member])


def simulate_paths(field: CoefficientField, x0, domain: BoundedDomain, T: float, dt: float,
                   master_seed: int, paths=1000, ladder=None, integrand: Callable | None = None,
                   record: bool = False, t0: float = 0.0, threads: int = 1) -> PathBatch:
    """Localized Euler-Maruyama for a batch of paths.

    Parameters
    ----------
    x0 : array_like
        Shared start point ``(d,)`` or per-path starts ``(n, d)``.
    paths : int or array of int
        Path count (indices ``0..n-1``) or explicit stream indices.
    ladder : sequence of int, optional
        Step indices at which stopped states (and integrals) are kept;
        defaults to the final step.
    integrand : callable, optional
        ``f(t, x)`` integrated by the trapezoid rule up to ``t ^ tau``.
    """
    idx = _indices(paths)
    n_steps = step_count(T, dt, t0)
    d = field.dim
    starts = _as_starts(x0, len(idx), d)
    step_offset = int(round(t0 / dt))

    def step(t, S, xi):
        return em_step(field, t, S[0], xi, dt, np.sqrt(dt))[None]

    def run(sub, off):
        return march(step, _box_outside(domain), starts[off:off + len(sub)][None], master_seed, sub, dt,
                     n_steps, t0, step_offset, ladder, integrand, record)

    res = _merge(_chunked(run, idx, threads))
    return _batch(res, 0, master_seed, idx, dt, t0, n_steps)


def euler_maruyama_localized(field: CoefficientField, x0, domain: BoundedDomain, T: float, dt: float,
                             stream: RNGStreamSpec) -> PathSample:
    """Single path ``X_{k+1} = X_k + b dt + sigma sqrt(dt) xi_k`` until the first exit."""
    batch = simulate_paths(field, x0, domain, T, dt, stream.master_seed, [stream.path_index], record=True)
    return batch.path(0)


def simulate_tied_pairs(field_a: CoefficientField, field_b: CoefficientField, x0, domain: BoundedDomain,
                        T: float, dt: float, master_seed: int, paths=1000, ladder=None,
                        record: bool = False, threads: int = 1) -> tuple[PathBatch, PathBatch]:
    """Two fields driven by identical increments, stopped when either leaves ``domain``.

    Besides the stopped states, the returned batches carry the running
    supremum of ``|X - X'|`` in ``integrals`` (one row per ladder point).
    """
    if field_a.dim != field_b.dim:
        raise SimulationError("tied fields must share the dimension")
    idx = _indices(paths)
    n_steps = step_count(T, dt)
    d = field_a.dim
    starts = _as_starts(x0, len(idx), d)

    def run(sub, off):
        sq = np.sqrt(dt)
        n = len(sub)
        gap = np.zeros(n)
        lad = np.array(sorted(set(int(k) for k in (ladder if ladder is not None else [n_steps]))))
        marks = {int(k): i for i, k in enumerate(lad)}
        gap_snaps: list = [None] * len(lad)

        def step(t, S, xi):
            return np.stack([em_step(field_a, t, S[0], xi, dt, sq), em_step(field_b, t, S[1], xi, dt, sq)])

        def monitor(k, live, S):
            g = np.linalg.norm(S[0] - S[1], axis=-1)
            gap[live] = np.maximum(gap[live], np.where(np.isfinite(g), g, np.inf))
            if k in marks:
                gap_snaps[marks[k]] = gap.copy()

        s0 = np.stack([starts[off:off + n], starts[off:off + n]])
        res = march(step, _box_outside(domain), s0, master_seed, sub, dt, n_steps, 0.0, 0, lad,
                    None, record, monitor)
        # step 0 has zero gap; ladder points after every path stopped keep the final sup
        gap_snaps = [np.zeros(n) if k == 0 else (gap.copy() if g is None else g)
                     for k, g in zip(lad, gap_snaps)]
        res["integrals"] = np.array(gap_snaps)
        return res

    res = _merge(_chunked(run, idx, threads))
    return (_batch(res, 0, master_seed, idx, dt, 0.0, n_steps), _batch(res, 1, master_seed, idx, dt, 0.0, n_steps))


def simulate_tied_pair(field_a: CoefficientField, field_b: CoefficientField, x0, domain: BoundedDomain,
                       T: float, dt: float, stream: RNGStreamSpec) -> tuple[PathSample, PathSample]:
    a, b = simulate_tied_pairs(field_a, field_b, x0, domain, T, dt, stream.master_seed,
                               [stream.path_index], record=True)
    return a.path(0), b.path(0)


@dataclass
class GlobalizationReport:
    """Per-path exit times from the nested boxes ``D_R = (-R, R)^d``.

    ``tau[i, j]`` is the first grid time path ``i`` leaves ``D_{R_j}``
    (``nan`` if it stays inside up to ``T``).  A path is flagged explosive
    when it leaves the last box before ``T`` or its state becomes non-finite.
    """

    radii: np.ndarray
    tau: np.ndarray
    explosive: np.ndarray
    blown_up: np.ndarray
    T: float

    @property
    def explosion_fraction(self) -> float:
        return float(np.mean(self.explosive)) if len(self.explosive) else 0.0

    def exit_frequency(self, j: int, horizon: float | None = None) -> float:
        """Fraction of paths with ``tau_{R_j} <= horizon`` (default ``T``)."""
        h = self.T if horizon is None else horizon
        return float(np.mean(np.nan_to_num(self.tau[:, j], nan=np.inf) <= h + 1e-12))

    def highest_level(self) -> np.ndarray:
        """Index of the box each path ends in (``len(radii)`` if it left them all)."""
        return np.sum(np.isfinite(self.tau), axis=1)


def simulate_global_batch(field: CoefficientField, x0, T: float, dt: float, master_seed: int,
                          radii: Sequence[float], paths=1000, record: bool = False,
                          threads: int = 1) -> tuple[PathBatch, GlobalizationReport]:
    """Globalization ladder: one path continues unchanged through growing boxes.

    Continuing the same state and stream in ``D_{R_{j+1}}`` after leaving
    ``D_{R_j}`` is the same as marching once in the largest box and noting
    when each smaller box is left, which is what this does.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or radii.size == 0 or np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise SimulationError("radius schedule must be positive and strictly increasing")
    d = field.dim
    x0a = np.asarray(x0, dtype=float)
    if np.any(np.abs(x0a) >= radii[0]):
        raise SimulationError("start point outside the first box")
    idx = _indices(paths)
    n_steps = step_count(T, dt)
    starts = _as_starts(x0, len(idx), d)
    outer = BoundedDomain.centered_box(float(radii[-1]), d)

    def run(sub, off):
        tau_idx = np.full((len(sub), len(radii)), -1, dtype=np.int64)

        def monitor(k, live, S):
            r = np.max(np.abs(S[0]), axis=-1)
            r = np.where(np.isfinite(r), r, np.inf)
            for j, R in enumerate(radii):
                hit = (r >= R) & (tau_idx[live, j] < 0)
                tau_idx[live[hit], j] = k

        def step(t, S, xi):
            return em_step(field, t, S[0], xi, dt, np.sqrt(dt))[None]

        res = march(step, _box_outside(outer), starts[off:off + len(sub)][None], master_seed, sub, dt,
                    n_steps, 0.0, 0, None, None, record, monitor)
        res["tau_idx"] = tau_idx
        return res

    parts = _chunked(run, idx, threads)
    tau_idx = np.concatenate([p.pop("tau_idx") for p in parts])
    res = _merge(parts)
    batch = _batch(res, 0, master_seed, idx, dt, 0.0, n_steps)
    tau = np.where(tau_idx >= 0, tau_idx * dt, np.nan)
    explosive = (tau_idx[:, -1] >= 0) | batch.blown_up
    return batch, GlobalizationReport(radii, tau, explosive, batch.blown_up.copy(), T)


def simulate_global(field: CoefficientField, x0, T: float, dt: float, stream: RNGStreamSpec,
                    radii: Sequence[float]) -> tuple[PathSample, GlobalizationReport]:
    batch, rep = simulate_global_batch(field, x0, T, dt, stream.master_seed, radii,
                                       [stream.path_index], record=True)
    return batch.path(0), rep
