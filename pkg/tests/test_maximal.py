import numpy as np
import pytest

from singdrift.geometry import BoundedDomain, GridError, GridFunction, SpaceTimeGrid, sample_field
from singdrift.maximal import (
    brute_force_maximal,
    extend_reflection,
    global_maximal,
    local_maximal,
    maximal_report,
    smooth_cutoff,
)


def line(n, a=0.0, b=1.0, n_t=2):
    return SpaceTimeGrid(BoundedDomain.interval(a, b), T=1.0, n_t=n_t, n_x=(n,))


def test_constant_maps_to_abs_constant():
    g = line(41)
    f = sample_field(lambda t, x: np.full(x.shape[:-1], -2.5), g)
    assert np.all(local_maximal(f).values == 2.5)
    assert np.all(global_maximal(f).values == 2.5)


def test_indicator_example():
    # f = indicator of [0, 0.5) on (0, 1); left-closed like the drift regimes
    g = line(201)
    f = sample_field(lambda t, x: (x[..., 0] < 0.5).astype(float), g)
    m = local_maximal(f).values[0]
    xs = g.axes()[0]
    i75 = int(np.argmin(np.abs(xs - 0.75)))
    i50 = int(np.argmin(np.abs(xs - 0.5)))
    assert m[i75] == 0.0
    # averages over (0.5 - r, 0.5 + r) tend to 1/2 from below: (k-1)/(2k-1)
    h = g.dx[0]
    assert m[i50] == pytest.approx(0.5, abs=2 * h)
    assert m[i50] < 0.5


def test_linear_function_fixed():
    g = line(101)
    f = sample_field(lambda t, x: x[..., 0], g)
    xs = g.axes()[0]
    assert np.allclose(local_maximal(f).values[0], xs, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_brute_force_exactly_1d(seed):
    g = line(64, n_t=1 + 1)
    rng = np.random.default_rng(seed)
    f = GridFunction(g, rng.normal(size=(2, 64)))
    fast = local_maximal(f).values[0]
    slow = brute_force_maximal(f.values[0], g)
    assert np.array_equal(fast, slow)


def test_matches_brute_force_2d_anisotropic():
    g = SpaceTimeGrid(BoundedDomain((0.0, 0.0), (1.0, 1.6)), T=1.0, n_t=2, n_x=(11, 13))
    rng = np.random.default_rng(5)
    f = GridFunction(g, rng.normal(size=(2, 11, 13)))
    assert np.array_equal(local_maximal(f).values[0], brute_force_maximal(f.values[0], g))


def test_sublinear_and_dominates_abs():
    g = SpaceTimeGrid(BoundedDomain((0.0, 0.0), (1.0, 1.0)), T=1.0, n_t=2, n_x=(15, 15))
    rng = np.random.default_rng(7)
    f = GridFunction(g, rng.normal(size=(2, 15, 15)))
    h = GridFunction(g, rng.normal(size=(2, 15, 15)))
    mf, mh = local_maximal(f).values, local_maximal(h).values
    msum = local_maximal(GridFunction(g, f.values + h.values)).values
    assert np.all(msum <= mf + mh + 1e-12)
    assert np.all(mf >= np.abs(f.values))


@pytest.mark.parametrize("p", [2.0, 4.0])
def test_empirical_lp_bound(p):
    g = line(80)
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(20):
        f = GridFunction(g, rng.standard_cauchy(size=(2, 80)))
        rep = maximal_report(f, p=p)
        ratios.append(rep.operator_norm_estimate)
        assert np.all(rep.output.values >= 0)
    c_p = max(ratios)
    assert np.isfinite(c_p) and 1.0 <= c_p < 10.0


def test_extension_of_one_is_cutoff():
    g = line(41)
    f = sample_field(lambda t, x: np.ones(x.shape[:-1]), g)
    ext = extend_reflection(f, 0.25)
    v = ext.extended.values[0]
    k = ext.margin_nodes[0]
    assert np.all(v[k:k + 41] == 1.0)
    assert v[0] == 0.0 and v[-1] == 0.0
    assert np.all(np.diff(v[: k + 1]) >= 0)
    assert np.allclose(v[:k + 1], smooth_cutoff(np.arange(k, -1, -1) / k))


def test_reflection_mirrors_across_face():
    g = line(101)
    f = sample_field(lambda t, x: x[..., 0], g)
    ext = extend_reflection(f, 0.2)
    k = ext.margin_nodes[0]
    xs_big = ext.extended.grid.axes()[0]
    h = g.dx[0]
    # node y = -h sits one index left of the face; before the cutoff its value is f(h) = h
    i = k - 1
    assert xs_big[i] == pytest.approx(-h)
    cut = smooth_cutoff(1 / k)
    assert ext.extended.values[0, i] == pytest.approx(h * cut)


def test_restriction_is_bitwise_identity_and_holder_ratio():
    g = SpaceTimeGrid(BoundedDomain.interval(0.0, 1.0), T=1.0, n_t=2, n_x=(201,))
    f = sample_field(lambda t, x: np.sqrt(np.abs(x[..., 0] - 0.5)), g)
    ext = extend_reflection(f, 0.3, alpha=0.5)
    k = ext.margin_nodes[0]
    assert np.array_equal(ext.extended.values[:, k:k + 201], f.values)
    assert np.isfinite(ext.holder_ratio) and ext.holder_ratio >= 1.0


def test_extension_2d_restriction():
    g = SpaceTimeGrid(BoundedDomain((0.0, 0.0), (1.0, 2.0)), T=1.0, n_t=2, n_x=(11, 21))
    rng = np.random.default_rng(2)
    f = GridFunction(g, rng.normal(size=(2, 11, 21)))
    ext = extend_reflection(f, 0.3)
    k0, k1 = ext.margin_nodes
    assert np.array_equal(ext.extended.values[:, k0:k0 + 11, k1:k1 + 21], f.values)
    assert np.all(ext.extended.values[:, 0, :] == 0.0)


def test_margin_too_large():
    g = line(11)
    f = sample_field(lambda t, x: x[..., 0], g)
    with pytest.raises(GridError):
        extend_reflection(f, 0.6)
