"""Command-line entry point.

Each experiment subcommand runs the config's blocks of that kind (or one
block with default parameters when the config declares none); ``run``
executes every block in order and ``report`` re-checks a finished output
directory.  Global flags may appear before or after the subcommand.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import BLOCK_DEFAULTS, ConfigError, parse_config, validate_block
from .runner import run, verify_manifest

COLUMNS = {
    "simulate": "CSV columns: path, exited (0/1), exit_time (empty if alive at T), blown_up, x1..xd "
                "(state at T ^ tau).",
    "pde": "CSV columns: t, x1..xd, u (or u_0..u_{m-1} for the drift source), du_dx1.. per component; "
           "one block of rows per exported time level.",
    "zvonkin": "CSV columns: as for simulate, for paths built through the transform.  With compare = true "
               "a direct Euler run on an independent seed is summarized next to it.",
    "krylov": "CSV columns: r, s, length, lhs (mean of int_r^s |f| up to exit), se, rhs (C_hat |I|^delta ||f||).",
    "stability": "CSV columns: eps, M (E sup |X - X'|^p0), se, N (perturbation size^p0), bound (C_hat N), "
                 "[gronwall].",
    "lyapunov": "CSV columns: t, mean (E e^{-C t^tau} V), se, limit (V0 + 3 se), ok.",
    "globalize": "CSV columns: path, explosive, blown_up, tau_R1..tau_Rk (empty if the box was not left).",
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML scenario file")
    p.add_argument("--seed", type=int, default=d, help="override the config's master seed")
    p.add_argument("--out", default=d, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=d, help="worker threads per block")
    p.add_argument("--bit-exact", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="fixed-order accumulation (single worker)")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="singdrift", description="Run simulation, PDE and estimate-check experiments "
                                  "declared in a TOML scenario file.")
    top.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(top, suppress=False)
    sub = top.add_subparsers(dest="command", required=True)
    for kind in BLOCK_DEFAULTS:
        s = sub.add_parser(kind, help=f"run {kind} blocks", epilog=COLUMNS[kind])
        _global_flags(s, suppress=True)
    s = sub.add_parser("run", help="run every block in declared order",
                       epilog="Writes NN_kind.csv per block, summary.json and manifest.json.")
    _global_flags(s, suppress=True)
    s = sub.add_parser("report", help="verify checksums of an output directory and print its summary")
    _global_flags(s, suppress=True)
    s.add_argument("dir", nargs="?", help="output directory (defaults to --out or the config's out)")
    return top


def _report(args, cfg) -> int:
    out = Path(args.dir or args.out or (cfg.out if cfg else None) or "singdrift_out")
    if not (out / "manifest.json").exists():
        print(f"no manifest.json in {out}", file=sys.stderr)
        return 2
    ok, bad = verify_manifest(out)
    man = json.loads((out / "manifest.json").read_text())
    for b in man["blocks"]:
        verdict = {True: "pass", False: "FAIL", None: "-"}[b["passed"]]
        line = f"{b['index']:02d} {b['kind']:<10} {b['status']:<6} {verdict}"
        print(line + (f"  {b['error']}" if b["error"] else ""))
    print(f"rollup: {man['passed']}; checksums: {'ok' if ok else 'MISMATCH ' + ', '.join(bad)}")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    if args.config:
        try:
            cfg = parse_config(args.config)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return 2
    if args.command == "report":
        return _report(args, cfg)
    if cfg is None:
        print("--config is required", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    only = None if args.command == "run" else args.command
    if only and not any(b["kind"] == only for b in cfg.experiments):
        cfg = replace(cfg, experiments=cfg.experiments + [validate_block({"kind": only}, len(cfg.experiments),
                                                                 cfg.dim, cfg.scenario)])
    threads = 1 if args.bit_exact else args.threads
    man = run(cfg, args.out, threads, only)
    for b in man.blocks:
        verdict = {True: "pass", False: "FAIL", None: "-"}[b["passed"]]
        print(f"{b['index']:02d} {b['kind']:<10} {b['status']:<6} {verdict} {' '.join(b['files'])}"
              + (f"  {b['error']}" if b["error"] else ""))
    print(f"wrote {man.out_dir}/manifest.json")
    return 0 if man.ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
