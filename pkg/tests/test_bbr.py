import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptbec import bbr, ode
from ptbec import mastereq as me
from ptbec.core import (DensityMatrix, FockBasis, covariances_from_state, make_params,
                        moments_from_state, product_state, product_state_moments)


def _random_state_moments(rng, n_max=3):
    b = FockBasis(n_max)
    a = rng.normal(size=(b.dim, b.dim)) + 1j * rng.normal(size=(b.dim, b.dim))
    rho = a @ a.conj().T
    return moments_from_state(DensityMatrix(b, rho / np.trace(rho).real))


def _random_params(rng):
    return make_params(J=rng.uniform(0.2, 2), g=rng.uniform(-1, 1), N0=int(rng.integers(2, 50)),
                       gamma_loss=rng.uniform(0, 2))


def _bloch_derivative(y, params, neglect=False):
    out = np.empty(14)
    bbr.bloch_rhs(0.0, np.asarray(y, float), bbr._bloch_args(params, neglect), out)
    return out


# ---------------------------------------------------------------- conversions and paths

def test_bloch_general_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        y = _random_state_moments(rng)
        g = bbr.general_from_bloch(y)
        np.testing.assert_allclose(bbr.bloch_from_general(g), y, atol=1e-12)
        assert g.symmetry_residual() < 1e-12


def test_general_path_matches_bloch_path():
    rng = np.random.default_rng(1)
    for _ in range(300):
        y = _random_state_moments(rng)
        p = _random_params(rng)
        gl, gg = bbr.dimer_site_rates(p)
        d = bbr.bbr_derivative_general(bbr.general_from_bloch(y), gl, gg, p)
        ref = _bloch_derivative(y, p)
        got = bbr.bloch_from_general(d)
        assert np.abs(got - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())
        raw = bbr.bbr_derivative_general(bbr.general_from_bloch(y), gl, gg, p, consistent=False)
        np.testing.assert_allclose(bbr.bloch_from_general(raw), got,
                                   atol=1e-10 * max(1.0, np.abs(ref).max()))


def test_dataclass_derivative_wrapper():
    p = make_params(J=1, g=0.5, N0=10, gamma_loss=0.8)
    s, d = bbr.pure_initial_moments(0.4, 1.3, 10)
    ds, dd = bbr.bbr_derivative_bloch(s, d, p)
    ref = _bloch_derivative(np.concatenate([s.as_array(), d.as_array()]), p)
    np.testing.assert_array_equal(np.concatenate([ds.as_array(), dd.as_array()]), ref)
    assert d.matrix()[3, 0] == d.xn and len(d.as_array()) == 10


def test_general_free_tunnelling_conserves_trace():
    p = make_params(J=1.3, g=0, N0=1, gamma_loss=0)
    rng = np.random.default_rng(2)
    for M in (2, 3, 4):
        a = rng.normal(size=(M, M)) + 1j * rng.normal(size=(M, M))
        sig = a @ a.conj().T
        m = bbr.GeneralMoments(sig, np.zeros((M,) * 4, dtype=complex))
        d = bbr.bbr_derivative_general(m, np.zeros(M), np.zeros(M), p)
        # open chain: i dsigma = [T, sigma] with T the transposed hopping matrix
        T = -p.J * (np.eye(M, k=1) + np.eye(M, k=-1))
        np.testing.assert_allclose(d.sigma, 1j * (T @ sig - sig @ T), atol=1e-12)
        assert abs(np.trace(d.sigma)) < 1e-12


def test_general_single_site_loss_decay():
    p = make_params(J=0, g=0, N0=1, gamma_loss=0)
    sig = np.diag([3.0, 2.0, 1.0]).astype(complex)
    m = bbr.GeneralMoments(sig, np.zeros((3,) * 4, dtype=complex))
    d = bbr.bbr_derivative_general(m, [0.7, 0, 0], [0, 0, 0], p)
    assert d.sigma[0, 0] == pytest.approx(-0.7 * 3.0)
    assert d.sigma[1, 1] == 0 and d.sigma[2, 2] == 0


def test_general_rejects_bad_rates():
    m = bbr.GeneralMoments(np.eye(2, dtype=complex), np.zeros((2,) * 4, dtype=complex))
    with pytest.raises(ValueError):
        bbr.bbr_derivative_general(m, [1.0], [0.0, 0.0], make_params())


def test_general_integration_preserves_symmetries():
    p = make_params(J=1, g=0.5, N0=6, gamma_loss=0)
    y0 = moments_from_state(product_state(0.3, 1.1, 6, FockBasis(6)))
    m0 = bbr.general_from_bloch(y0)
    t = np.linspace(0, 3, 13)
    out = bbr.integrate_general(m0, t, [0.5, 0.0], [0.0, 0.5 * 6 / 8], p)
    assert max(m.symmetry_residual() for m in out) < 1e-7
    series = bbr.integrate_bbr(y0, t, p.replace(gamma_loss=0.5))
    np.testing.assert_allclose([bbr.bloch_from_general(m) for m in out], series.moments,
                               atol=1e-7 * 6)


# ---------------------------------------------------------------- Bloch-form properties

def test_balance_gives_zero_particle_flux():
    for N0 in (2, 10, 100, 1000):
        p = make_params(J=1, g=0.5, N0=N0, gamma_loss=1.3)
        y = product_state_moments(0.0, math.pi / 2, N0)
        assert y[2] == pytest.approx(0, abs=1e-12 * N0)
        y[2] = 0.0
        assert abs(_bloch_derivative(y, p)[3]) < 1e-12 * N0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, math.pi), st.floats(0.1, 2))
def test_u_zero_first_order_has_no_covariance_terms(phi, theta, gam):
    p = make_params(J=1, g=0, N0=20, gamma_loss=gam)
    y = product_state_moments(phi, theta, 20)
    z = y.copy()
    z[4:] = np.random.default_rng(0).normal(size=10) * 5
    np.testing.assert_array_equal(_bloch_derivative(y, p)[:4], _bloch_derivative(z, p)[:4])


def test_closed_linear_rotation_conserves_length():
    p = make_params(J=1.2, g=0, N0=5, gamma_loss=0)
    y = product_state_moments(0.7, 0.9, 5)
    d = _bloch_derivative(y, p)
    assert d[3] == 0
    assert abs(np.dot(y[:3], d[:3])) < 1e-12


def test_closed_system_conserves_particle_number():
    p = make_params(J=1, g=1.0, N0=100, gamma_loss=0)
    t = np.linspace(0, 100, 401)
    s = bbr.integrate_bbr(product_state_moments(1.0, 1.2, 100), t, p)
    assert s.ok
    assert np.abs(s.n - 100).max() <= 1e-9 * 100


def test_g_zero_decouples_first_order_from_covariances():
    p = make_params(J=1, g=0, N0=50, gamma_loss=1.0)
    t = np.linspace(0, 20, 81)
    y = product_state_moments(math.pi / 2, math.pi / 2, 50)
    z = y.copy()
    z[4:] += np.random.default_rng(3).normal(size=10) * 3
    a = bbr.integrate_bbr(y, t, p)
    b = bbr.integrate_bbr(z, t, p)
    np.testing.assert_allclose(a.moments[:, :4], b.moments[:, :4], atol=1e-9 * 50)


def test_neglect_mode_columns_and_dynamics():
    p = make_params(J=1, g=1, N0=100, gamma_loss=0.5)
    t = np.linspace(0, 30, 601)
    y = product_state_moments(math.pi / 2, math.pi / 2, 100)
    full = bbr.integrate_bbr(y, t, p)
    neg = bbr.integrate_bbr(y, t, p, mode="neglect")
    assert np.isnan(neg.moments[:, 4:]).all()
    assert neg.purity.min() > full.purity.min()
    # without gain and loss neglect mode keeps a pure state pure up to integrator drift
    closed = bbr.integrate_bbr(y, t, p.replace(gamma_loss=0), mode="neglect")
    np.testing.assert_allclose(closed.purity, 1, atol=1e-6)


def test_divergence_flag_instead_of_exception():
    p = make_params(J=1, g=0.5, N0=100, gamma_loss=1.6)
    t = np.linspace(0, 400, 2001)
    s = bbr.integrate_bbr(product_state_moments(2.4, 1.6, 100), t, p, divergence_factor=10)
    assert s.status == ode.DIVERGED and not s.stable
    assert np.isnan(s.moments[-1]).all()
    stop = np.searchsorted(t, s.t_stop)
    assert np.isfinite(s.moments[:stop]).all()


def test_integrate_bbr_validation():
    p = make_params()
    with pytest.raises(ValueError):
        bbr.integrate_bbr(np.zeros(13), [0, 1], p)
    with pytest.raises(ValueError):
        bbr.integrate_bbr(np.zeros(14), [0, 1], p, mode="half")
    out = bbr.integrate_bbr(bbr.pure_initial_moments(0, 1, 100), [0.0], p)
    np.testing.assert_allclose(out.moments[0], product_state_moments(0, 1, 100))


def test_closed_form_covariances_match_brute_force():
    for N0 in range(1, 7):
        for phi, theta in [(0.0, 0.0), (0.4, 1.0), (2.5, 2.2), (math.pi / 2, math.pi / 2)]:
            psi = product_state(phi, theta, N0, FockBasis(N0))
            np.testing.assert_allclose(product_state_moments(phi, theta, N0)[4:],
                                       covariances_from_state(psi), atol=1e-12)


# ---------------------------------------------------------------- dense oracle

def _oracle_runs():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(40))
    t = np.linspace(0, 3, 31)
    dense = me.dense_moment_series(psi.density_matrix(sparse=True), t, p, truncation="warn").moments
    return dense, bbr.integrate_bbr(moments_from_state(psi), t, p).moments


def test_first_order_moments_track_dense_oracle():
    dense, mom = _oracle_runs()
    scale = dense[:, 3:4]
    assert (np.abs(mom[:, :4] - dense[:, :4]) / scale).max() < 5e-2


@pytest.mark.xfail(strict=True, reason="third-order closure error exceeds 5e-2 relative for "
                   "some covariances at N0 = 4 before t = 3")
def test_all_moments_track_dense_oracle():
    dense, mom = _oracle_runs()
    scale = np.concatenate([dense[:, 3:4].repeat(4, 1), dense[:, 3:4].repeat(10, 1) ** 2], 1)
    assert (np.abs(mom - dense) / scale).max() < 5e-2
