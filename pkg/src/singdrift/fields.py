"""Coefficient fields ``(b, sigma)`` and the built-in scenarios.

Drift and diffusion callables are vectorized: ``drift(t, x)`` takes ``x`` of
shape ``(..., d)`` and ``t`` broadcastable to ``x.shape[:-1]`` and returns
shape ``(..., d)``; ``diffusion(t, x)`` returns ``(..., d, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Drift and diffusion with the regularity metadata they are run under.

    Parameters
    ----------
    drift, diffusion : callable
        See module docstring for shapes.
    dim : int
        Spatial dimension ``d``.
    kappa : float
        Ellipticity constant; ``sigma sigma^T`` must have spectrum in
        ``[1/kappa, kappa]`` on the domain of interest.
    alpha : float
        Hölder exponent of ``sigma`` in space.
    p, q : float
        Space and time integrability exponents of the drift.
    lipschitz : float or None
        Known Lipschitz constant of the drift, when it has one.
    """

    drift: Callable
    diffusion: Callable
    dim: int = 1
    kappa: float = 1.0001
    alpha: float = 1.0
    p: float = 4.0
    q: float = 4.0
    name: str = "custom"
    lipschitz: float | None = None
    autonomous: bool = True

    def __post_init__(self):
        if not self.kappa >= 1.0:
            raise ValueError("kappa must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not (1 < self.p and 1 < self.q):
            raise ValueError("p and q must exceed 1")

    def hypothesis_value(self) -> float:
        """``d/p + 2/q``: < 2 for Krylov runs, < 1 for Zvonkin and stability runs."""
        return self.dim / self.p + 2.0 / self.q

    def a(self, t, x) -> np.ndarray:
        s = np.asarray(self.diffusion(t, x), dtype=float)
        return s @ np.swapaxes(s, -1, -2)

    def with_drift(self, drift: Callable, name: str | None = None, **kw) -> "CoefficientField":
        return replace(self, drift=drift, name=name or self.name, **kw)

    def perturbed(self, eps: float, h_drift: Callable | None = None,
                  h_diffusion: Callable | None = None, kappa: float | None = None) -> "CoefficientField":
        """Field ``(b + eps*h_b, sigma + eps*h_sigma)``."""
        b0, s0 = self.drift, self.diffusion
        drift = b0 if h_drift is None else (lambda t, x: b0(t, x) + eps * np.asarray(h_drift(t, x)))
        diffusion = s0 if h_diffusion is None else (
            lambda t, x: s0(t, x) + eps * np.asarray(h_diffusion(t, x)))
        lip = self.lipschitz if h_drift is None else None
        return replace(self, drift=drift, diffusion=diffusion, name=f"{self.name}+{eps:g}h",
                       kappa=kappa or self.kappa, lipschitz=lip)


def _lead(x):
    return np.asarray(x, dtype=float).shape[:-1]


def constant_diffusion(sigma, dim: int = 1) -> Callable:
    """Diffusion returning a fixed ``d x d`` matrix (a scalar means ``sigma*I``)."""
    s = np.asarray(sigma, dtype=float)
    mat = s * np.eye(dim) if s.ndim == 0 else s.reshape(dim, dim)

    def diffusion(t, x):
        return np.broadcast_to(mat, _lead(x) + (dim, dim)).copy()

    return diffusion


def constant_drift(c, dim: int = 1) -> Callable:
    vec = np.broadcast_to(np.asarray(c, dtype=float), (dim,)).copy()

    def drift(t, x):
        return np.broadcast_to(vec, _lead(x) + (dim,)).copy()

    return drift


def zero_drift(dim: int = 1) -> Callable:
    return constant_drift(0.0, dim)


def _kappa_for(sigma_lo: float, sigma_hi: float) -> float:
    return max(sigma_hi ** 2, 1.0 / sigma_lo ** 2, 1.0) * 1.0001


def brownian(dim: int = 1, sigma: float = 1.0, **kw) -> CoefficientField:
    return CoefficientField(zero_drift(dim), constant_diffusion(sigma, dim), dim=dim,
                            kappa=kw.pop("kappa", _kappa_for(sigma, sigma)), name="brownian",
                            lipschitz=0.0, **kw)


def ornstein_uhlenbeck(rate: float = 1.0, sigma: float = 1.0, **kw) -> CoefficientField:
    def drift(t, x):
        return -rate * np.asarray(x, dtype=float)

    return CoefficientField(drift, constant_diffusion(sigma), dim=1,
                            kappa=kw.pop("kappa", _kappa_for(sigma, sigma)), name="ou",
                            lipschitz=abs(rate), **kw)


def _regime(x, thetas):
    # regime i covers theta_{i-1} <= x < theta_i
    return np.searchsorted(np.asarray(thetas, dtype=float), x, side="right")


def threshold_ou(betas: Sequence[float], alphas: Sequence[float], thetas: Sequence[float],
                 sigma: float = 1.0, **kw) -> CoefficientField:
    """Threshold Ornstein-Uhlenbeck drift ``sum_i (beta_i - alpha_i x) 1{theta_{i-1} <= x < theta_i}``.

    ``thetas`` holds the ``n - 1`` interior thresholds for ``n`` regimes.
    """
    betas = np.asarray(betas, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    if not (len(betas) == len(alphas) == len(thetas) + 1):
        raise ValueError("need n betas, n alphas and n-1 thresholds")
    if np.any(np.diff(thetas) <= 0):
        raise ValueError("thresholds not increasing")

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        k = _regime(x, thetas)
        return betas[k] - alphas[k] * x

    return CoefficientField(drift, constant_diffusion(sigma), dim=1,
                            kappa=kw.pop("kappa", _kappa_for(sigma, sigma)),
                            name=kw.pop("name", "threshold_ou"), **kw)


def piecewise_poly(coefficients: Sequence[Sequence[float]], thetas: Sequence[float],
                   sigma: float = 1.0, **kw) -> CoefficientField:
    """Piecewise polynomial drift ``sum_k (sum_j beta_{k,j} x^j) 1{theta_{k-1} <= x < theta_k}``.

    ``coefficients[k][j-1]`` is ``beta_{k,j}``; powers start at 1.
    """
    coeffs = [np.asarray(c, dtype=float) for c in coefficients]
    thetas = np.asarray(thetas, dtype=float)
    if len(coeffs) != len(thetas) + 1:
        raise ValueError("need one coefficient row per regime")
    if np.any(np.diff(thetas) <= 0):
        raise ValueError("thresholds not increasing")
    width = max(len(c) for c in coeffs)
    table = np.zeros((len(coeffs), width))
    for k, c in enumerate(coeffs):
        table[k, : len(c)] = c

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        k = _regime(x, thetas)
        rows = table[k]  # (..., 1, width)
        out = np.zeros_like(x)
        power = np.ones_like(x)
        for j in range(width):
            power = power * x
            out = out + rows[..., j] * power
        return out

    return CoefficientField(drift, constant_diffusion(sigma), dim=1,
                            kappa=kw.pop("kappa", _kappa_for(sigma, sigma)),
                            name=kw.pop("name", "piecewise_poly"), **kw)


def sinusoidal_diffusion(amplitude: float = 0.5, drift: Callable | None = None,
                         **kw) -> CoefficientField:
    """1D field with ``sigma(x) = 1 + amplitude * sin(x)``."""
    if not 0 <= amplitude < 1:
        raise ValueError("amplitude must lie in [0, 1)")

    def diffusion(t, x):
        x = np.asarray(x, dtype=float)
        return (1.0 + amplitude * np.sin(x))[..., None]

    lo, hi = 1.0 - amplitude, 1.0 + amplitude
    return CoefficientField(drift or zero_drift(1), diffusion, dim=1,
                            kappa=kw.pop("kappa", _kappa_for(lo, hi)),
                            name=kw.pop("name", "sinusoidal_sigma"), **kw)


def tabulated(nodes: Sequence[float], drift_values: Sequence[float],
              sigma_values: Sequence[float], **kw) -> CoefficientField:
    """1D field from values tabulated on increasing nodes (linear interpolation,
    constant extrapolation)."""
    xs = np.asarray(nodes, dtype=float)
    bv = np.asarray(drift_values, dtype=float)
    sv = np.asarray(sigma_values, dtype=float)
    if np.any(np.diff(xs) <= 0) or not (len(xs) == len(bv) == len(sv)):
        raise ValueError("tabulated nodes must increase and match value lengths")

    def drift(t, x):
        x = np.asarray(x, dtype=float)
        return np.interp(x, xs, bv)

    def diffusion(t, x):
        x = np.asarray(x, dtype=float)
        return np.interp(x, xs, sv)[..., None]

    return CoefficientField(drift, diffusion, dim=1,
                            kappa=kw.pop("kappa", _kappa_for(np.min(np.abs(sv)), np.max(np.abs(sv)))),
                            name=kw.pop("name", "custom"), **kw)
