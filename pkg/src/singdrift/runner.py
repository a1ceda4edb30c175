"""Deterministic orchestration of config experiment blocks and result persistence.

Every block writes ``NN_kind.csv`` into the output directory; all block
summaries go to ``summary.json`` and ``manifest.json`` records checksums,
the config hash and the wall-clock.  Only the manifest's ``wall_clock``
entry depends on anything other than the config bytes and the seed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .config import ScenarioConfig
from .geometry import BoundedDomain, SpaceTimeGrid
from .lyapunov import explosion_bound, quadratic_lyapunov, radial_growth, supermartingale_check, verify_lyapunov
from .pde import PDEProblem, drift_problem, export_slices, solve_cauchy_dirichlet
from .rng import derive_seed
from .simulate import simulate_global_batch, simulate_paths
from .verify import krylov_check, stability_check
from .zvonkin import simulate_via_zvonkin_batch

log = logging.getLogger(__name__)

# seed tags for auxiliary runs inside a block
TAG_COMPARE, TAG_MC, TAG_NEGATIVE = 11, 12, 13


@dataclass
class BlockResult:
    index: int
    kind: str
    status: str  # "ok" or "error"
    passed: bool | None
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: str = ""


@dataclass
class RunManifest:
    config_hash: str
    version: str
    out_dir: str
    blocks: list
    files: dict
    wall_clock: float
    passed: bool | None

    @property
    def ok(self) -> bool:
        return all(b["status"] == "ok" for b in self.blocks)

    def to_dict(self) -> dict:
        return dict(config_hash=self.config_hash, version=self.version, blocks=self.blocks,
                    files=self.files, wall_clock=self.wall_clock, passed=self.passed)


# ---------------------------------------------------------------------------
# output helpers


def _num(v):
    """JSON-safe scalar: numpy types unwrapped, non-finite floats to ``None``."""
    if isinstance(v, dict):
        return {str(k): _num(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_num(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_num(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_csv(path: Path, header: list, rows) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
            n += 1
    return n


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# block implementations: each returns (summary, passed) and writes its CSV


class _Ctx:
    def __init__(self, cfg: ScenarioConfig, threads: int):
        self.cfg = cfg
        self.field = cfg.build_field()
        self.domain = cfg.build_domain()
        self.threads = threads
        self.d = cfg.dim

    def x0(self, blk):
        if blk.get("x0") is not None:
            return [float(v) for v in blk["x0"]]
        return [0.5 * (a + b) for a, b in zip(self.cfg.domain["lo"], self.cfg.domain["hi"])]

    def seed(self, i: int, tag: int | None = None) -> int:
        s = derive_seed(self.cfg.seed, 1000 + i) if i else self.cfg.seed
        return s if tag is None else derive_seed(s, tag)


def _path_rows(batch):
    et = batch.exit_time
    for i in range(batch.n_paths):
        yield [int(batch.path_indices[i]), bool(batch.exited[i]), et[i], bool(batch.blown_up[i]),
               *batch.terminal[i]]


def _path_header(d):
    return ["path", "exited", "exit_time", "blown_up"] + [f"x{i + 1}" for i in range(d)]


def _batch_summary(batch, T):
    stopped = np.where(batch.exited, batch.exit_time, T)
    n = batch.n_paths
    return dict(paths=n, exit_fraction=float(batch.exited.mean()),
                mean_stopped_time=float(stopped.mean()),
                mean_stopped_time_se=float(stopped.std(ddof=1) / np.sqrt(n)) if n > 1 else None,
                terminal_mean=batch.terminal.mean(axis=0).tolist(),
                blown_up=int(batch.blown_up.sum()))


def block_simulate(ctx: _Ctx, i, blk, path: Path):
    c = ctx.cfg
    b = simulate_paths(ctx.field, ctx.x0(blk), ctx.domain, c.T, c.dt, ctx.seed(i), blk["paths"],
                       threads=ctx.threads)
    write_csv(path, _path_header(ctx.d), _path_rows(b))
    return _batch_summary(b, c.T), None


def _pde_solve(ctx, blk, n_x, n_t):
    c = ctx.cfg
    if blk["source"] == "drift":
        prob = drift_problem(ctx.field, ctx.domain, 0.0, c.T)
    else:
        prob = PDEProblem(ctx.field, lambda t, x: np.ones(np.shape(x)[:-1]), ctx.domain, c.T)
    grid = SpaceTimeGrid(ctx.domain, c.T, n_t, (n_x,) * ctx.d)
    return solve_cauchy_dirichlet(prob, grid)


def block_pde(ctx: _Ctx, i, blk, path: Path):
    c = ctx.cfg
    n_x = blk["n_x"] or c.grid["n_x"]
    n_t = blk["n_t"] or round(c.T / c.dt) + 1
    sol = _pde_solve(ctx, blk, n_x, n_t)
    k = np.unique(np.linspace(0, n_t - 1, max(2, blk["slices"])).round().astype(int))
    export_slices(sol, path, k)
    x0 = np.asarray(ctx.x0(blk))[None]
    val = np.atleast_1d(np.asarray(sol.value(0.0, x0), dtype=float).reshape(-1))
    out = dict(n_x=n_x, n_t=n_t, value_at_x0=val.tolist(), upwind_fraction=sol.upwind_fraction,
               max_residual=float(np.max(sol.residuals)))
    err, ref = np.zeros_like(val), val
    if blk["refine"]:
        fine = _pde_solve(ctx, blk, 2 * n_x - 1, 2 * n_t - 1)
        fv = np.atleast_1d(np.asarray(fine.value(0.0, x0), dtype=float).reshape(-1))
        err, ref = np.abs(fv - val), fv
        out.update(refined_value=fv.tolist(), refinement_gap=err.tolist())
    passed = None
    if blk["mc_paths"]:
        src = ((lambda t, x: np.asarray(ctx.field.drift(t, x), dtype=float)) if blk["source"] == "drift"
               else (lambda t, x: np.ones((len(x), 1))))

        def integrand(t, x):
            v = np.asarray(src(t, x), dtype=float)
            return v.reshape(len(x), -1)[:, 0]

        dt = blk["mc_dt"] or c.dt
        b = simulate_paths(ctx.field, x0[0], ctx.domain, c.T, dt, ctx.seed(i, TAG_MC), blk["mc_paths"],
                           integrand=integrand, threads=ctx.threads)
        I = b.integrals[-1]
        mc, se = float(I.mean()), float(I.std(ddof=1) / np.sqrt(len(I)))
        comb = float(np.hypot(se, err[0]))
        passed = bool(abs(mc - ref[0]) <= 3 * comb)
        out.update(mc_value=mc, mc_se=se, combined_se=comb, mc_dt=dt, feynman_kac_passed=passed)
    return out, passed


def block_zvonkin(ctx: _Ctx, i, blk, path: Path):
    c = ctx.cfg
    n_x = blk["n_x"] or c.grid["n_x"]
    x0 = ctx.x0(blk)
    z, run = simulate_via_zvonkin_batch(ctx.field, x0, ctx.domain, c.T, c.dt, ctx.seed(i), blk["paths"],
                                        n_x=n_x, epsilon=blk["epsilon"])
    write_csv(path, _path_header(ctx.d), _path_rows(z))
    out = dict(transformed=_batch_summary(z, c.T), epsilon=run.epsilon, windows=len(run.windows),
               max_admissibility=max(run.admissibility), audits_passed=all(a.passed for a in run.audits),
               max_iterations=run.max_iterations)
    passed = bool(out["audits_passed"] and out["max_admissibility"] <= 0.5)
    if blk["compare"]:
        d = simulate_paths(ctx.field, x0, ctx.domain, c.T, c.dt, ctx.seed(i, TAG_COMPARE), blk["paths"],
                           threads=ctx.threads)
        cmp = compare_batches(z, d, c.T)
        out.update(direct=_batch_summary(d, c.T), comparison=cmp)
        passed = passed and cmp["passed"]
    return out, passed


def compare_batches(a, b, T: float) -> dict:
    """Terminal mean within 3 combined SE and a KS test on ``tau ^ T`` at the 1% level."""
    xa, xb = a.terminal[:, 0], b.terminal[:, 0]
    na, nb = len(xa), len(xb)
    se = float(np.sqrt(xa.var(ddof=1) / na + xb.var(ddof=1) / nb))
    gap = float(abs(xa.mean() - xb.mean()))
    ta = np.where(a.exited, a.exit_time, T)
    tb = np.where(b.exited, b.exit_time, T)
    ks = stats.ks_2samp(ta, tb)
    crit = float(np.sqrt(-0.5 * np.log(0.01 / 2)) * np.sqrt((na + nb) / (na * nb)))
    return dict(terminal_gap=gap, terminal_se=se, mean_ok=bool(gap <= 3 * se), ks_statistic=float(ks.statistic),
                ks_critical_1pct=crit, ks_ok=bool(ks.statistic < crit),
                passed=bool(gap <= 3 * se and ks.statistic < crit))


def _krylov_f(ctx, blk):
    kind, th = blk["f"], float(blk["theta"])
    if kind == "one":
        return lambda t, x: np.ones(len(x))
    if kind == "indicator":
        return lambda t, x: (np.asarray(x)[:, 0] > th).astype(float)
    return lambda t, x: np.linalg.norm(np.asarray(ctx.field.drift(t, x), dtype=float), axis=-1)


def block_krylov(ctx: _Ctx, i, blk, path: Path):
    dom = ctx.domain
    if blk["lo"] is not None or blk["hi"] is not None:
        lo = blk["lo"] or ctx.cfg.domain["lo"]
        hi = blk["hi"] or ctx.cfg.domain["hi"]
        dom = BoundedDomain(tuple(lo), tuple(hi))
    rep = krylov_check(ctx.field, _krylov_f(ctx, blk), dom, ctx.x0(blk), blk["intervals"], blk["p"], blk["q"],
                       blk["delta"], blk["paths"], ctx.cfg.dt, ctx.seed(i), blk["restarts"],
                       blk["restart_paths"], threads=ctx.threads)
    rows = rep.rows()
    write_csv(path, list(rows[0]), (list(r.values()) for r in rows))
    return rep.summary(), rep.passed


def block_stability(ctx: _Ctx, i, blk, path: Path):
    c = ctx.cfg
    d = ctx.d
    if blk["h"] == "one":
        hv = lambda t, x: np.ones(np.shape(x))  # noqa: E731
    else:
        hv = lambda t, x: np.sin(np.asarray(x, dtype=float))  # noqa: E731
    if blk["direction"] == "drift":
        hb, hs = hv, None
    else:
        hb = None

        def hs(t, x):
            return hv(t, x)[..., None] * np.eye(d)

    base = ctx.field
    if blk["p"] or blk["q"]:
        base = replace(base, p=blk["p"] or base.p, q=blk["q"] or base.q)
    rep = stability_check(base, hb, hs, blk["eps"], ctx.domain, ctx.x0(blk), c.T, c.dt, blk["paths"],
                          blk["p0"], ctx.seed(i), threads=ctx.threads)
    rows = rep.rows()
    write_csv(path, list(rows[0]), (list(r.values()) for r in rows))
    return rep.summary(), rep.passed


def block_lyapunov(ctx: _Ctx, i, blk, path: Path):
    c = ctx.cfg
    spec = quadratic_lyapunov(ctx.d, ctx.cfg.lyapunov_offset)
    R = float(blk["region"])
    region = BoundedDomain.centered_box(R, ctx.d)
    ver = verify_lyapunov(ctx.field, spec, region, blk["C"])
    C = ver.c_hat if blk["C"] is None else float(blk["C"])
    if blk["C"] is None and np.isfinite(C):  # re-check at the fitted constant
        ver = verify_lyapunov(ctx.field, spec, region, C)
    x0 = ctx.x0(blk)
    n_steps = round(c.T / c.dt)
    ladder = list(range(0, n_steps + 1, int(blk["every"])))
    if ladder[-1] != n_steps:
        ladder.append(n_steps)
    out = dict(verify_passed=ver.passed, c_hat=ver.c_hat, C=C, failure=ver.failure, region=R)
    passed = bool(np.isfinite(ver.c_hat)) and ver.passed
    if np.isfinite(C):
        b = simulate_paths(ctx.field, x0, region, c.T, c.dt, ctx.seed(i), blk["paths"], ladder=ladder,
                           threads=ctx.threads)
        sm = supermartingale_check(b, spec, C)
        rows = sm.rows()
        write_csv(path, list(rows[0]), (list(r.values()) for r in rows))
        out["supermartingale_passed"] = sm.passed
        passed = passed and sm.passed
        if blk["negative"]:
            neg = supermartingale_check(b, spec, C / 2)
            out["negative_violations"] = len(neg.violations)
            passed = passed and not neg.passed
    else:
        write_csv(path, ["t", "mean", "se", "limit", "ok"], [])
    grows, infs = radial_growth(spec, blk["radii"], ctx.d, c.T)
    out["radial_growth"] = grows
    _, g = simulate_global_batch(ctx.field, x0, blk["N"], c.dt, ctx.seed(i, TAG_NEGATIVE), blk["radii"],
                                 blk["paths"], threads=ctx.threads)
    freq = []
    for j, Rj in enumerate(blk["radii"]):
        bound = explosion_bound(spec, C, x0, blk["N"], Rj) if np.isfinite(C) else 1.0
        f = g.exit_frequency(j, blk["N"])
        freq.append(dict(R=Rj, frequency=f, bound=bound, ok=bool(f <= bound)))
    out["exit_frequency"] = freq
    passed = bool(passed and grows and all(r["ok"] for r in freq))
    return out, passed


def block_globalize(ctx: _Ctx, i, blk, path: Path):
    c = ctx.cfg
    batch, rep = simulate_global_batch(ctx.field, ctx.x0(blk), c.T, c.dt, ctx.seed(i), blk["radii"],
                                       blk["paths"], threads=ctx.threads)
    header = ["path", "explosive", "blown_up"] + [f"tau_R{j + 1}" for j in range(len(rep.radii))]
    write_csv(path, header, ([int(batch.path_indices[k]), bool(rep.explosive[k]), bool(rep.blown_up[k]),
                              *rep.tau[k]] for k in range(batch.n_paths)))
    out = dict(radii=rep.radii.tolist(), explosion_fraction=rep.explosion_fraction,
               explosive=int(rep.explosive.sum()), blown_up=int(rep.blown_up.sum()),
               exit_frequency=[rep.exit_frequency(j) for j in range(len(rep.radii))])
    return out, None


BLOCKS = dict(simulate=block_simulate, pde=block_pde, zvonkin=block_zvonkin, krylov=block_krylov,
              stability=block_stability, lyapunov=block_lyapunov, globalize=block_globalize)


# ---------------------------------------------------------------------------


def run(cfg: ScenarioConfig, out_dir=None, threads: int | None = None, only: str | None = None) -> RunManifest:
    """Run the config's experiment blocks in declared order.

    ``only`` restricts the run to blocks of one kind (numbering is kept, so
    file names do not depend on the filter).  A block that raises is
    recorded with status ``error`` and the run continues.
    """
    out = Path(out_dir or cfg.out or "singdrift_out")
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Ctx(cfg, threads or cfg.threads)
    start = time.perf_counter()
    (out / "config.toml").write_text(cfg.dumps())
    results = []
    for i, blk in enumerate(cfg.experiments):
        kind = blk["kind"]
        if only is not None and kind != only:
            continue
        name = f"{i + 1:02d}_{kind}.csv"
        path = out / name
        log.info("block %d (%s) starting", i + 1, kind)
        try:
            summary, passed = BLOCKS[kind](ctx, i, blk, path)
            results.append(BlockResult(i + 1, kind, "ok", passed, [name] if path.exists() else [], summary))
        except Exception as e:  # recorded, not fatal
            log.error("block %d (%s) failed: %s", i + 1, kind, e)
            log.debug(traceback.format_exc())
            if path.exists():
                path.unlink()
            results.append(BlockResult(i + 1, kind, "error", None, [], {}, f"{type(e).__name__}: {e}"))
    summary = {f"{r.index:02d}_{r.kind}": dict(status=r.status, passed=r.passed, error=r.error, result=r.summary)
               for r in results}
    dump_json(summary, out / "summary.json")
    names = ["config.toml", "summary.json"] + [f for r in results for f in r.files]
    files = {n: sha256(out / n) for n in names}
    verdicts = [r.passed for r in results if r.passed is not None]
    rollup = None if not verdicts else all(verdicts)
    man = RunManifest(cfg.digest(), __version__, str(out),
                      [dict(index=r.index, kind=r.kind, status=r.status, passed=r.passed, files=r.files,
                            error=r.error) for r in results],
                      files, round(time.perf_counter() - start, 3), rollup)
    dump_json(man.to_dict(), out / "manifest.json")
    return man


def verify_manifest(out_dir) -> tuple[bool, list]:
    """Re-hash every file listed in ``manifest.json``; returns (all match, mismatched names)."""
    out = Path(out_dir)
    man = json.loads((out / "manifest.json").read_text())
    bad = [n for n, h in man["files"].items() if not (out / n).exists() or sha256(out / n) != h]
    return not bad, bad
