"""Scenario configuration: TOML parsing, validation, defaults and round-trip serialization.

A config is a TOML document::

    seed = 7
    T = 1.0
    dt = 1e-3

    [scenario]
    name = "threshold_ou"
    betas = [0.5, -0.5]
    alphas = [1.0, 1.0]
    thetas = [0.0]

    [domain]
    lo = [-1.0]
    hi = [1.0]

    [[experiment]]
    kind = "simulate"
    paths = 10

Experiment blocks run in the order they are declared.  Unknown keys are
rejected everywhere; every omitted key takes the default listed in
:data:`BLOCK_DEFAULTS` (``None`` means "derived at run time").
"""
from __future__ import annotations

import copy
import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .fields import CoefficientField, piecewise_poly, tabulated, threshold_ou
from .geometry import BoundedDomain


class ConfigError(ValueError):
    """Named validation failure."""


SCENARIOS = {
    "threshold_ou": dict(betas=None, alphas=None, thetas=None, sigma=1.0),
    "piecewise_poly": dict(coefficients=None, thetas=None, sigma=1.0),
    "custom": dict(nodes=None, drift=None, sigma=None),
}
SCENARIO_COMMON = dict(p=4.0, q=4.0, alpha=1.0, kappa=None)

LYAPUNOV_V = {"1+|x|^2": 1.0, "|x|^2": 0.0}

BLOCK_DEFAULTS: dict[str, dict] = {
    "simulate": dict(paths=1000, x0=None, record=False),
    "pde": dict(source="drift", n_x=None, n_t=None, x0=None, slices=5, mc_paths=0, mc_dt=None, refine=True),
    "zvonkin": dict(paths=1000, x0=None, n_x=None, epsilon=None, compare=True),
    "krylov": dict(f="one", theta=0.0, intervals=[[0.0, 1.0], [0.0, 0.5], [0.0, 0.25], [0.0, 0.125], [0.0, 0.064]],
                   p=None, q=None, delta=None, paths=10_000, x0=None, restarts=0, restart_paths=200,
                   lo=None, hi=None),
    "stability": dict(direction="sigma", h="one", eps=[0.01, 0.02, 0.04, 0.08], p0=1.0, p=None, q=None,
                      paths=10_000, x0=None),
    "lyapunov": dict(region=10.0, C=None, paths=10_000, x0=None, radii=[5.0, 10.0], N=1.0, every=50,
                     negative=True),
    "globalize": dict(radii=[5.0, 10.0, 20.0, 50.0, 100.0], paths=10_000, x0=None),
}
KINDS = tuple(BLOCK_DEFAULTS)
TOP_DEFAULTS = dict(T=1.0, dt=1e-3, threads=1, out=None, V="1+|x|^2")
TOP_KEYS = {"seed", "scenario", "domain", "grid", "experiment"} | set(TOP_DEFAULTS)


@dataclass
class ScenarioConfig:
    seed: int
    scenario: dict
    domain: dict
    grid: dict
    experiments: list
    T: float = 1.0
    dt: float = 1e-3
    threads: int = 1
    out: str | None = None
    V: str = "1+|x|^2"
    source: str = field(default="", compare=False)

    # -- derived objects -------------------------------------------------
    def build_field(self) -> CoefficientField:
        return build_field(self.scenario)

    def build_domain(self) -> BoundedDomain:
        return BoundedDomain(tuple(self.domain["lo"]), tuple(self.domain["hi"]))

    @property
    def dim(self) -> int:
        return len(self.domain["lo"])

    @property
    def lyapunov_offset(self) -> float:
        return LYAPUNOV_V[self.V]

    def to_dict(self) -> dict:
        """Plain structure with ``None`` entries dropped (TOML has no null)."""
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items() if v is not None}
            if isinstance(obj, list):
                return [clean(v) for v in obj]
            return obj

        top = dict(seed=self.seed, T=self.T, dt=self.dt, threads=self.threads, out=self.out, V=self.V,
                   scenario=self.scenario, domain=self.domain, grid=self.grid, experiment=self.experiments)
        return clean(copy.deepcopy(top))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def build_field(sc: dict) -> CoefficientField:
    kw = dict(p=sc["p"], q=sc["q"], alpha=sc["alpha"])
    if sc.get("kappa") is not None:
        kw["kappa"] = sc["kappa"]
    name = sc["name"]
    if name == "threshold_ou":
        return threshold_ou(sc["betas"], sc["alphas"], sc["thetas"], sc["sigma"], **kw)
    if name == "piecewise_poly":
        return piecewise_poly(sc["coefficients"], sc["thetas"], sc["sigma"], **kw)
    return tabulated(sc["nodes"], sc["drift"], sc["sigma"], **kw)


def _reject_unknown(got: dict, allowed, where: str):
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) {extra} in {where}")


def _require(d: dict, key: str, where: str):
    if d.get(key) is None:
        raise ConfigError(f"missing required key '{key}' in {where}")


def _increasing(vals, what: str):
    if np.any(np.diff(np.asarray(vals, dtype=float)) <= 0):
        raise ConfigError(f"{what} not increasing")


def _scenario(raw: dict) -> dict:
    _require(raw, "name", "[scenario]")
    name = raw["name"]
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}'; expected one of {sorted(SCENARIOS)}")
    spec = dict(SCENARIOS[name], **SCENARIO_COMMON)
    _reject_unknown(raw, set(spec) | {"name"}, "[scenario]")
    sc = dict(spec, **raw)
    for k, v in spec.items():
        if v is None and k != "kappa":
            _require(sc, k, f"[scenario] ({name})")
    if name == "threshold_ou":
        if not len(sc["betas"]) == len(sc["alphas"]) == len(sc["thetas"]) + 1:
            raise ConfigError("threshold_ou needs n betas, n alphas and n-1 thresholds")
        _increasing(sc["thetas"], "thresholds")
    elif name == "piecewise_poly":
        if len(sc["coefficients"]) != len(sc["thetas"]) + 1:
            raise ConfigError("piecewise_poly needs one coefficient row per regime")
        _increasing(sc["thetas"], "thresholds")
    else:
        if not len(sc["nodes"]) == len(sc["drift"]) == len(sc["sigma"]):
            raise ConfigError("custom scenario needs equally long nodes, drift and sigma tables")
        _increasing(sc["nodes"], "nodes")
    if not (sc["p"] > 1 and sc["q"] > 1):
        raise ConfigError("p and q must exceed 1")
    return {"name": name, **{k: sc[k] for k in spec}}


def _hypothesis(d: int, p: float, q: float, bound: float, kind: str):
    v = d / p + 2.0 / q
    if not v < bound:
        raise ConfigError(f"{kind} block needs d/p + 2/q < {bound:g}, got {v:g} (d={d}, p={p:g}, q={q:g})")


def validate_block(raw: dict, i: int, d: int, scenario: dict) -> dict:
    where = f"[[experiment]] #{i + 1}"
    _require(raw, "kind", where)
    kind = raw["kind"]
    if kind not in BLOCK_DEFAULTS:
        raise ConfigError(f"unknown experiment kind '{kind}' in {where}; expected one of {list(KINDS)}")
    defaults = BLOCK_DEFAULTS[kind]
    _reject_unknown(raw, set(defaults) | {"kind"}, f"{where} ({kind})")
    blk = {"kind": kind, **copy.deepcopy(defaults), **raw}
    if blk.get("x0") is not None and len(blk["x0"]) != d:
        raise ConfigError(f"x0 in {where} must have {d} coordinates")
    p = blk.get("p") or scenario["p"]
    q = blk.get("q") or scenario["q"]
    if kind == "krylov":
        _hypothesis(d, p, q, 2.0, "krylov")
        if blk["f"] not in ("one", "indicator", "drift"):
            raise ConfigError("krylov f must be 'one', 'indicator' or 'drift'")
    elif kind in ("stability", "zvonkin"):
        _hypothesis(d, p, q, 1.0, kind)
    if kind == "stability":
        if blk["direction"] not in ("sigma", "drift") or blk["h"] not in ("one", "sin"):
            raise ConfigError("stability direction must be 'sigma' or 'drift' and h 'one' or 'sin'")
    if kind == "pde" and blk["source"] not in ("drift", "one"):
        raise ConfigError("pde source must be 'drift' or 'one'")
    for key in ("radii",):
        if key in blk:
            _increasing(blk[key], key)
    if "paths" in blk and int(blk["paths"]) < 1:
        raise ConfigError(f"paths must be positive in {where}")
    return blk


def parse_dict(raw: dict, source: str = "") -> ScenarioConfig:
    _reject_unknown(raw, TOP_KEYS, "top level")
    if "seed" not in raw:
        raise ConfigError("missing seed: every run needs an explicit master seed")
    if not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    top = dict(TOP_DEFAULTS, **{k: raw[k] for k in TOP_DEFAULTS if k in raw})
    if top["V"] not in LYAPUNOV_V:
        raise ConfigError(f"V must be one of {sorted(LYAPUNOV_V)}")
    _require(raw, "scenario", "top level")
    _require(raw, "domain", "top level")
    scenario = _scenario(raw["scenario"])
    dom = raw["domain"]
    _reject_unknown(dom, {"lo", "hi"}, "[domain]")
    _require(dom, "lo", "[domain]")
    _require(dom, "hi", "[domain]")
    lo, hi = [float(v) for v in dom["lo"]], [float(v) for v in dom["hi"]]
    if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
        raise ConfigError("domain needs lo < hi on every axis")
    d = len(lo)
    if d != 1:
        raise ConfigError("config scenarios are one-dimensional; build d > 1 fields through the library API")
    grid = raw.get("grid", {})
    _reject_unknown(grid, {"n_x"}, "[grid]")
    grid = {"n_x": grid.get("n_x", 161)}
    if not (top["T"] > 0 and top["dt"] > 0):
        raise ConfigError("T and dt must be positive")
    n = round(top["T"] / top["dt"])
    if abs(n * top["dt"] - top["T"]) > 1e-9 * top["T"]:
        raise ConfigError("dt must divide T")
    blocks = [validate_block(b, i, d, scenario) for i, b in enumerate(raw.get("experiment", []))]
    return ScenarioConfig(raw["seed"], scenario, {"lo": lo, "hi": hi}, grid, blocks, float(top["T"]),
                          float(top["dt"]), int(top["threads"]), top["out"], top["V"], source)


def parse_config(path) -> ScenarioConfig:
    """Read and validate a TOML config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_dict(raw, str(path))


def parse_string(text: str) -> ScenarioConfig:
    return parse_dict(tomllib.loads(text))
