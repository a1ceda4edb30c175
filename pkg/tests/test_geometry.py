import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from singdrift.fields import CoefficientField, constant_diffusion, sinusoidal_diffusion, threshold_ou, zero_drift
from singdrift.geometry import (
    BoundedDomain,
    GridError,
    GridFunction,
    SpaceTimeGrid,
    ellipticity_check,
    holder_seminorm_estimate,
    interpolate,
    lqp_norm,
    sample_field,
)


@pytest.fixture
def unit_grid():
    return SpaceTimeGrid(BoundedDomain.interval(0.0, 1.0), T=1.0, n_t=41, n_x=(101,))


def test_domain_invariants():
    D = BoundedDomain((0.0, -1.0), (1.0, 1.0))
    assert D.dim == 2
    assert D.diameter == pytest.approx(np.sqrt(5.0))
    assert D.contains([0.5, 0.0])
    assert not D.contains([0.0, 0.0])  # boundary is outside the open box
    assert list(D.contains(np.array([[0.5, 0.5], [2.0, 0.0]]))) == [True, False]
    with pytest.raises(GridError):
        BoundedDomain((1.0,), (1.0,))


def test_grid_spacings():
    g = SpaceTimeGrid(BoundedDomain.interval(-1, 1), T=2.0, n_t=5, n_x=(11,))
    assert g.dt == 0.5
    assert g.dx[0] == pytest.approx(0.2)
    assert np.all(np.diff(g.axes()[0]) > 0)
    with pytest.raises(GridError):
        SpaceTimeGrid(BoundedDomain.interval(0, 1), T=1.0, n_t=1, n_x=(11,))


@pytest.mark.parametrize("p,q", [(1, 1), (2, 3), (4, 4), (np.inf, 2), (2, np.inf), (np.inf, np.inf)])
def test_lqp_norm_of_one_is_one(unit_grid, p, q):
    one = sample_field(lambda t, x: np.ones(x.shape[:-1]), unit_grid)
    assert lqp_norm(one, unit_grid, p, q) == pytest.approx(1.0, rel=1e-12)
    assert lqp_norm(lambda t, x: 1.0, unit_grid, p, q) == pytest.approx(1.0, rel=1e-12)


def test_lqp_norm_linear_matches_exact_integral(unit_grid):
    # int_0^1 x^2 dx = 1/3; midpoint rule error is h^2/12 per unit length
    f = sample_field(lambda t, x: x[..., 0], unit_grid)
    h = unit_grid.dx[0]
    assert lqp_norm(f, unit_grid, 2, 2) == pytest.approx(np.sqrt(1 / 3), abs=h ** 2)
    assert lqp_norm(lambda t, x: x[..., 0], unit_grid, 2, 2) == pytest.approx(np.sqrt(1 / 3), abs=h ** 2)


def test_lqp_norm_constant(unit_grid):
    c = sample_field(lambda t, x: np.full(x.shape[:-1], -3.5), unit_grid)
    assert lqp_norm(c, unit_grid, 3, 5) == pytest.approx(3.5, rel=1e-12)


def test_lqp_norm_rejects_bad_input(unit_grid):
    with pytest.raises(GridError):
        lqp_norm(lambda t, x: np.where(x[..., 0] > 0.5, np.nan, 1.0), unit_grid, 2, 2)
    with pytest.raises(GridError):
        lqp_norm(lambda t, x: 1.0, unit_grid, 0.5, 2)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: v == 0 or abs(v) > 1e-6),
       p=st.sampled_from([1.0, 2.0, 3.5, np.inf]),
       q=st.sampled_from([1.0, 2.0, 6.0, np.inf]), seed=st.integers(0, 2 ** 16))
def test_lqp_norm_homogeneous_and_monotone(c, p, q, seed):
    g = SpaceTimeGrid(BoundedDomain((0.0, 0.0), (1.0, 2.0)), T=1.0, n_t=6, n_x=(7, 9))
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(6, 7, 9))
    f = GridFunction(g, vals)
    base = lqp_norm(f, g, p, q)
    assert lqp_norm(GridFunction(g, c * vals), g, p, q) == pytest.approx(abs(c) * base, rel=1e-12, abs=1e-300)
    bigger = GridFunction(g, np.abs(vals) + rng.uniform(0, 1, size=vals.shape))
    assert lqp_norm(bigger, g, p, q) >= base


def test_lqp_norm_equal_exponents_is_spacetime_lp():
    g = SpaceTimeGrid(BoundedDomain((0.0,), (2.0,)), T=3.0, n_t=9, n_x=(13,))
    rng = np.random.default_rng(1)
    f = GridFunction(g, rng.normal(size=(9, 13)))
    p = 3.0
    cells = np.abs(f.values)
    cells = 0.5 * (cells[1:] + cells[:-1])
    cells = 0.5 * (cells[:, 1:] + cells[:, :-1])
    direct = (np.sum(cells ** p) * g.dt * g.dx[0]) ** (1 / p)
    assert lqp_norm(f, g, p, p) == pytest.approx(direct, rel=1e-12)


def test_ellipticity_identity_passes():
    g = SpaceTimeGrid(BoundedDomain((0, 0), (1, 1)), T=1.0, n_t=3, n_x=(5, 5))
    field = CoefficientField(zero_drift(2), constant_diffusion(1.0, 2), dim=2, kappa=1.0001)
    assert ellipticity_check(field, g, samples=10).passed


def test_ellipticity_diag_fails_with_worst_four():
    g = SpaceTimeGrid(BoundedDomain((0, 0), (1, 1)), T=1.0, n_t=3, n_x=(5, 5))
    field = CoefficientField(zero_drift(2), constant_diffusion(np.diag([2.0, 1.0]), 2), dim=2, kappa=1.0)
    rep = ellipticity_check(field, g, samples=10)
    assert not rep.passed
    assert rep.worst_eigenvalue == pytest.approx(4.0)


def test_ellipticity_sinusoidal_threshold():
    # (1 + 0.5 sin x)^2 ranges over [0.25, 2.25]: kappa = 4 is the smallest admissible value
    g = SpaceTimeGrid(BoundedDomain.interval(-np.pi, np.pi), T=1.0, n_t=2, n_x=(2001,))
    assert ellipticity_check(sinusoidal_diffusion(0.5, kappa=4.0), g, samples=10 ** 6).passed
    rep = ellipticity_check(sinusoidal_diffusion(0.5, kappa=2.0), g, samples=10 ** 6)
    assert not rep.passed
    assert rep.min_eigenvalue == pytest.approx(0.25, abs=1e-6)


def _line_grid(a, b, n):
    return SpaceTimeGrid(BoundedDomain.interval(a, b), T=1.0, n_t=2, n_x=(n,))


def test_holder_constant_and_linear():
    g = _line_grid(0, 1, 51)
    assert holder_seminorm_estimate(sample_field(lambda t, x: np.full(x.shape[:-1], 2.0), g), 0.5) == 0.0
    assert holder_seminorm_estimate(sample_field(lambda t, x: x[..., 0], g), 1.0) == pytest.approx(1.0)


def test_holder_sqrt_abs_against_brute_force():
    g = _line_grid(-1, 1, 401)
    f = sample_field(lambda t, x: np.sqrt(np.abs(x[..., 0])), g)
    est = holder_seminorm_estimate(f, 0.5)
    xs = g.axes()[0]
    v = np.sqrt(np.abs(xs))
    brute = max(abs(v[i] - v[j]) / abs(xs[i] - xs[j]) ** 0.5
                for i in range(len(xs)) for j in range(i + 1, len(xs)))
    assert est == pytest.approx(brute, rel=1e-12)
    assert est <= 1.0 + 1e-12  # true seminorm is 1
    assert est > 0.99


def test_holder_random_pairs_never_exceed_true_value():
    g = SpaceTimeGrid(BoundedDomain((0, 0), (1, 1)), T=1.0, n_t=2, n_x=(120, 120))
    f = sample_field(lambda t, x: x[..., 0] - 2 * x[..., 1], g)
    est = holder_seminorm_estimate(f, 1.0, max_pairs=200_000)
    assert est <= np.sqrt(5) + 1e-12
    assert est > 2.0


def test_interpolate_nodes_exact_and_affine():
    g = SpaceTimeGrid(BoundedDomain((0.0, -1.0), (1.0, 1.0)), T=2.0, n_t=5, n_x=(6, 9))
    rng = np.random.default_rng(3)
    f = GridFunction(g, rng.normal(size=(5, 6, 9)))
    nodes = g.nodes()
    for k, t in enumerate(g.times):
        assert np.array_equal(interpolate(f, t, nodes), f.values[k])

    aff = sample_field(lambda t, x: 1.0 + 2 * t - 3 * x[..., 0] + 0.5 * x[..., 1], g)
    q = np.column_stack([rng.uniform(0, 1, 200), rng.uniform(-1, 1, 200)])
    tq = rng.uniform(0, 2, 200)
    exact = 1.0 + 2 * tq - 3 * q[:, 0] + 0.5 * q[:, 1]
    assert np.allclose(interpolate(aff, tq, q), exact, atol=1e-12)


def test_interpolate_multilinear_reproduced():
    g = SpaceTimeGrid(BoundedDomain((0.0, 0.0), (1.0, 1.0)), T=1.0, n_t=3, n_x=(5, 7))
    fn = lambda t, x: (1 + t) * x[..., 0] * x[..., 1] - x[..., 1]
    f = sample_field(fn, g)
    rng = np.random.default_rng(4)
    q = rng.uniform(0, 1, (300, 2))
    # bilinear in space reproduced exactly at a time node
    assert np.allclose(interpolate(f, 0.5, q), fn(0.5, q), atol=1e-12)


def test_interpolate_quadratic_error_bound():
    n = 21
    g = _line_grid(0, 1, n)
    f = sample_field(lambda t, x: x[..., 0] ** 2, g)
    h = g.dx[0]
    mids = g.axes()[0][:-1] + h / 2
    err = np.abs(interpolate(f, 0.0, mids[:, None]) - mids ** 2)
    assert np.all(err <= h ** 2 / 4 + 1e-15)


def test_interpolate_out_of_box():
    g = _line_grid(0, 1, 5)
    f = sample_field(lambda t, x: x[..., 0], g)
    with pytest.raises(GridError):
        interpolate(f, 0.5, [[1.5]])
    with pytest.raises(GridError):
        interpolate(f, 2.0, [[0.5]])
    assert interpolate(f, 0.5, [[1.5]], outside="zero")[0] == 0.0


def test_sample_field_threshold_jump():
    field = threshold_ou([0.5, -0.5], [1.0, 1.0], [0.0])
    g = _line_grid(-1, 1, 21)
    b = sample_field(field.drift, g).values[0, :, 0]
    xs = g.axes()[0]
    assert b[10] == pytest.approx(-0.5)  # x = 0 belongs to the right regime
    assert b[9] == pytest.approx(0.5 - xs[9])
    assert b[9] - b[10] > 0.9


def test_sample_field_rejects_nonfinite():
    g = _line_grid(0, 1, 5)
    with pytest.raises(GridError, match="node"):
        sample_field(lambda t, x: np.where(x[..., 0] == 0.5, np.inf, x[..., 0]), g)
