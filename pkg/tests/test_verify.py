import numpy as np
import pytest

from singdrift.fields import CoefficientField, brownian, constant_diffusion, constant_drift, ornstein_uhlenbeck, threshold_ou
from singdrift.geometry import BoundedDomain
from singdrift.simulate import simulate_paths
from singdrift.verify import VerificationError, exponential_moment_check, krylov_check, stability_check

TOU = threshold_ou([0.5, -0.5], [1.0, 1.0], [0.0])
HUGE = BoundedDomain.interval(-50.0, 50.0)
D2 = BoundedDomain.interval(-2.0, 2.0)
LADDER = [(0, 1.0), (0, 0.5), (0, 0.25), (0, 0.125), (0, 0.064)]
EPS = [0.01, 0.02, 0.04, 0.08]


def one(t, x):
    return np.ones(len(x))


def upper(t, x):
    return (np.asarray(x)[:, 0] > 0).astype(float)


def test_krylov_zero_integrand_skips_fit():
    r = krylov_check(brownian(), lambda t, x: np.zeros(len(x)), HUGE, [0.0], LADDER, paths=200)
    assert r.fit_skipped and r.passed and np.all(r.lhs == 0)


def test_krylov_unit_integrand_is_exact():
    r = krylov_check(brownian(), one, HUGE, [0.0], LADDER, p=4, q=4, paths=500)
    assert np.allclose(r.lhs, [s - a for a, s in LADDER], rtol=0, atol=1e-12)
    assert r.delta_hat == pytest.approx(1.0, abs=1e-9) and r.passed


def test_krylov_additive_over_intervals():
    a = krylov_check(TOU, upper, D2, [0.0], [(0, 1.0), (0, 0.5)], paths=1000, master_seed=4)
    b = krylov_check(TOU, upper, D2, [0.0], [(0.5, 1.0), (0.5, 0.75)], paths=1000, master_seed=4)
    assert a.lhs[0] == pytest.approx(a.lhs[1] + b.lhs[0], abs=1e-12)


def test_krylov_scaling_coherence():
    a = krylov_check(TOU, upper, D2, [0.0], LADDER, paths=1000, master_seed=2)
    b = krylov_check(TOU, lambda t, x: 2 * upper(t, x), D2, [0.0], LADDER, paths=1000, master_seed=2)
    assert np.array_equal(b.lhs, 2 * a.lhs)
    assert b.f_norm == pytest.approx(2 * a.f_norm, rel=1e-14)
    assert b.delta_hat == pytest.approx(a.delta_hat, abs=1e-12)


def test_krylov_discontinuous_integrand_exponent():
    r = krylov_check(TOU, upper, D2, [0.0], LADDER, p=4, q=4, paths=2000, restarts=3, restart_paths=100)
    assert r.delta == pytest.approx(0.125)
    assert r.delta_hat >= r.delta - r.delta_se
    assert r.passed and r.dominated
    assert len(r.restarts) == 3 and r.restart_passed
    assert all(np.isfinite(e["c_ratio"]) for e in r.restarts)


def test_krylov_input_errors():
    with pytest.raises(VerificationError, match="decreasing"):
        krylov_check(brownian(), one, HUGE, [0.0], [(0, 0.5), (0, 1.0)], paths=10)
    with pytest.raises(VerificationError, match="before r"):
        krylov_check(brownian(), one, BoundedDomain.interval(-0.05, 0.05), [0.0], [(2.0, 3.0), (2.0, 2.5)], paths=50)
    with pytest.raises(VerificationError, match="d/p"):
        krylov_check(brownian(), one, HUGE, [0.0], LADDER, p=1.01, q=1.01, paths=10)


def sigma_direction(t, x):
    return (1.0 + 0.5 * np.sin(np.asarray(x)))[..., None]


def test_stability_sigma_only():
    r = stability_check(brownian(), None, sigma_direction, EPS, D2, [0.0], 1.0, 1e-3, paths=2000)
    assert r.M_zero == 0.0
    assert 0.8 <= r.slope <= 1.2 and r.dominated and r.passed
    assert np.all(np.diff(r.M) >= -3 * r.M_se[1:])


def test_stability_drift_only_gronwall():
    ou = ornstein_uhlenbeck(1.0, 1.0)
    r = stability_check(ou, lambda t, x: np.sin(np.asarray(x)), None, EPS, D2, [0.0], 1.0, 1e-3, paths=2000)
    assert r.passed and r.gronwall_ok
    assert np.all(r.M <= r.gronwall)


def test_stability_errors():
    with pytest.raises(VerificationError):
        stability_check(brownian(), None, sigma_direction, [0.1], D2, [0.0], 1.0, 1e-3, paths=10)
    push = CoefficientField(constant_drift(5.0), constant_diffusion(1.0))
    with pytest.raises(VerificationError, match="first step"):
        stability_check(push, lambda t, x: np.ones_like(np.asarray(x)), None, EPS,
                        BoundedDomain.interval(-1, 1), [0.999], 0.1, 1e-3, paths=2000)
    with pytest.raises(VerificationError, match="degenerates"):
        stability_check(brownian(), None, lambda t, x: -np.ones(np.shape(x) + (1,)), [0.5, 1.0], D2, [0.0], 0.1, 1e-3,
                        paths=10)


def test_exponential_moment_trivial_cases():
    zero = np.zeros((3, 2000))
    r = exponential_moment_check(zero, [1.0, 5.0], sizes=(100, 1000, 2000))
    assert r.passed and all(v == [1.0, 1.0, 1.0] for v in r.estimates.values())
    b = simulate_paths(brownian(), [0.0], HUGE, 1.0, 1e-3, 0, 2000, ladder=[0, 500, 1000], integrand=one)
    r = exponential_moment_check(b, [0.3, 0.9], sizes=(100, 1000, 2000))
    assert r.kappa0 == pytest.approx(0.5, abs=1e-12)
    for lam in (0.3, 0.9):
        assert np.allclose(r.estimates[lam], np.exp(lam), rtol=1e-12)
    with pytest.raises(VerificationError, match="1/kappa0"):
        exponential_moment_check(b, [2.0], sizes=(100, 1000))


def test_exponential_moment_rejects_negative_beta():
    I = np.cumsum(np.full((4, 1000), -0.1), axis=0)
    with pytest.raises(VerificationError, match="beta < 0"):
        exponential_moment_check(I, [0.1], sizes=(100, 1000))


def test_exponential_moment_sinusoidal_sigma():
    from singdrift.fields import sinusoidal_diffusion

    fld = sinusoidal_diffusion(0.5)
    beta = lambda t, x: (0.5 * np.cos(np.asarray(x)[:, 0])) ** 2  # |sigma'|^2
    b = simulate_paths(fld, [0.0], HUGE, 1.0, 1e-3, 1, 10_000, ladder=range(0, 1001, 50), integrand=beta)
    r = exponential_moment_check(b, [1.0, 5.0], sizes=(1000, 10_000))
    assert r.kappa0 <= 0.25 * 0.05 + 1e-12
    assert r.passed
