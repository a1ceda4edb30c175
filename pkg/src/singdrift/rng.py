"""Counter-based normal variates addressed by (master seed, path index, step).

Every Brownian increment is a pure function of its address, so a path's noise
does not depend on which other paths share the batch, how the batch is split
across workers, or when the path stops.  Tied pairs and nested-domain runs
reuse the same addresses and therefore see identical increments.

The mixing function is the SplitMix64 finalizer applied to a Weyl sequence;
normals come from the ziggurat method (one hash per variate in about 99%
of draws).
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class RNGStreamSpec:
    """Identity of one path's noise stream."""

    master_seed: int
    path_index: int

    def key(self) -> int:
        return int(stream_keys(self.master_seed, np.array([self.path_index]))[0])


def stream_keys(master_seed: int, path_indices) -> np.ndarray:
    """Per-path 64-bit keys derived as hash(master, index)."""
    idx = np.asarray(path_indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        m = _mix64(np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        return _mix64(m ^ _mix64(idx * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))


def derive_seed(master_seed: int, tag: int) -> int:
    """Seed for an auxiliary run (e.g. restarts), disjoint in practice from path keys."""
    return int(stream_keys(master_seed ^ 0x5DEECE66D, [tag])[0] >> np.uint64(1))


@nb.njit(cache=True, nogil=True)
def _mix64_scalar(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _ziggurat_tables(layers: int = 128, r: float = 3.442619855899, v: float = 9.91256303526217e-3):
    # Doornik's layout: x[0] is the base strip width, x[layers] = 0
    x = np.zeros(layers + 1)
    f = np.exp(-0.5 * r * r)
    x[0] = v / f
    x[1] = r
    for i in range(2, layers):
        x[i] = np.sqrt(-2.0 * np.log(v / x[i - 1] + f))
        f = np.exp(-0.5 * x[i] * x[i])
    ratio = x[1:] / x[:-1]
    return x, ratio


_ZX, _ZR = _ziggurat_tables()
_ZIG_R = 3.442619855899


@nb.njit(cache=True, nogil=True)
def _unit(key, counter):
    # uniform on the midpoints of 2^53 cells in (0, 1), and 7 spare low bits
    h = _mix64_scalar(key + (counter + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15))
    return (np.float64(h >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16, np.int64(h & np.uint64(0x7F))


@nb.njit(cache=True, nogil=True)
def _ziggurat_slow(key, base, u, i, zx, zr, r):
    # continue variate ``base >> 20`` after its first draw (u, i) was rejected
    j = np.uint64(1)
    while True:
        if i == 0:
            # tail beyond r
            while True:
                a1, _ = _unit(key, base + j)
                a2, _ = _unit(key, base + j + np.uint64(1))
                j += np.uint64(2)
                x = np.log(a1) / r
                y = np.log(a2)
                if -2.0 * y >= x * x:
                    return x - r if u < 0.0 else r - x
        x = u * zx[i]
        f0 = np.exp(-0.5 * (zx[i] * zx[i] - x * x))
        f1 = np.exp(-0.5 * (zx[i + 1] * zx[i + 1] - x * x))
        a, _ = _unit(key, base + j)
        j += np.uint64(1)
        if f1 + a * (f0 - f1) < 1.0:
            return x
        a, i = _unit(key, base + j)
        j += np.uint64(1)
        u = 2.0 * a - 1.0
        if abs(u) < zr[i]:
            return u * zx[i]


@nb.njit(cache=True, nogil=True)
def _fill_normals(keys, step, dim, out, zx, zr, r):
    # out is (n_steps, n_paths, dim); entry (k, i, c) is variate (step + k)*dim + c of path i
    for k in range(out.shape[0]):
        for i in range(keys.shape[0]):
            key = keys[i]
            for c in range(dim):
                base = np.uint64((step + k) * dim + c) << np.uint64(20)
                a, layer = _unit(key, base)
                u = 2.0 * a - 1.0
                if abs(u) < zr[layer]:
                    out[k, i, c] = u * zx[layer]
                else:
                    out[k, i, c] = _ziggurat_slow(key, base, u, layer, zx, zr, r)


def normals_block(keys: np.ndarray, step: int, n_steps: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(n_steps, len(keys), dim)``.

    Variate ``(k, j)`` (step ``k``, component ``j``) is number ``k*dim + j`` of
    the path's stream, drawn by a 128-layer ziggurat whose uniforms are
    hashes of ``(variate number, sub-draw)``.  Blocks of any size reproduce
    the same values for the same addresses.
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    out = np.empty((n_steps, keys.shape[0], dim))
    _fill_normals(keys, step, dim, out, _ZX, _ZR, _ZIG_R)
    return out


def normals(keys: np.ndarray, step: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(len(keys), dim)`` for a single step."""
    return normals_block(keys, step, 1, dim)[0]
