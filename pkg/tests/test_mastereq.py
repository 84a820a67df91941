import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptbec import mastereq as me
from ptbec.core import (DensityMatrix, FockBasis, TruncationError, fock_state, make_params,
                        moments_from_state, product_state)


def _random_hermitian(rng, dim):
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    h = a @ a.conj().T
    return h / np.trace(h).real


# ---------------------------------------------------------------- Liouvillian

def test_vacuum_derivative_is_pure_gain():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    b = FockBasis(3)
    d = me.liouvillian_apply(fock_state(b, 0, 0).density_matrix(), p).dense()
    expect = np.zeros((b.dim, b.dim), dtype=complex)
    expect[b.index(0, 1), b.index(0, 1)] = p.gamma_gain
    expect[b.index(0, 0), b.index(0, 0)] = -p.gamma_gain
    np.testing.assert_allclose(d, expect, atol=1e-15)


def test_closed_system_is_commutator():
    p = make_params(J=1, g=0.7, N0=3, gamma_loss=0)
    b = FockBasis(3)
    rho = _random_hermitian(np.random.default_rng(1), b.dim)
    d = me.liouvillian_apply(DensityMatrix(b, rho), p, monitor=False).dense()
    H = b.hamiltonian(p).toarray()
    np.testing.assert_allclose(d, -1j * (H @ rho - rho @ H), atol=1e-13)
    assert abs(np.trace(d)) < 1e-12


def test_trace_free_and_hermitian_on_random_states():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.3)
    b = FockBasis(3)
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = me.liouvillian_apply(DensityMatrix(b, _random_hermitian(rng, b.dim)), p,
                                 monitor=False).dense()
        assert abs(np.trace(d)) < 1e-12
        assert np.abs(d - d.conj().T).max() < 1e-12


def test_jump_channels():
    p = make_params(N0=4, gamma_loss=1.0)
    loss, gain = me.jump_channels(p)
    b = FockBasis(4)
    La, Lg = loss.operator(b), gain.operator(b)
    n1, n2 = b.occupations
    np.testing.assert_allclose((La.conj().T @ La).diagonal(), n1)
    # the truncated a2 a2^dag is n2 + 1 below the top shell and 0 on it
    np.testing.assert_allclose((Lg.conj().T @ Lg).diagonal(), np.where(n2 < 4, n2 + 1, 0))
    assert (loss.site, loss.kind, gain.site, gain.kind) == (1, "loss", 2, "gain")


# ---------------------------------------------------------------- dense oracle

def test_rabi_oscillation():
    p = make_params(J=1, g=0, N0=1, gamma_loss=0)
    b = FockBasis(2)
    t = np.linspace(0, 6, 25)
    states = me.evolve_dense(fock_state(b, 1, 0).density_matrix(), t, p)
    n1 = [s.dense()[b.index(1, 0), b.index(1, 0)].real for s in states]
    np.testing.assert_allclose(n1, np.cos(t) ** 2, atol=1e-8)


def test_pure_loss_decay():
    p = make_params(J=0, g=0, N0=1, gamma_loss=0.8, balanced=False, gamma_gain=0.0)
    b = FockBasis(2)
    t = np.linspace(0, 4, 9)
    m = me.dense_moments(me.evolve_dense(fock_state(b, 1, 0).density_matrix(), t, p))
    # n1 = (n - s_z) / 2
    np.testing.assert_allclose(0.5 * (m[:, 3] - m[:, 2]), np.exp(-0.8 * t), atol=1e-9)


def test_zero_time_returns_initial_state():
    p = make_params(J=1, g=0.5, N0=3, gamma_loss=1.0)
    rho0 = product_state(0.3, 1.0, 3, FockBasis(12)).density_matrix()
    out = me.evolve_dense(rho0, [0.0], p)
    np.testing.assert_allclose(out[0].dense(), rho0.dense(), atol=1e-15)


def test_vacuum_gain_dense():
    p = make_params(J=0, g=0, N0=1, gamma_loss=0.0, balanced=False, gamma_gain=0.5)
    b = FockBasis(40)
    t = np.linspace(0, 2, 5)
    m = me.dense_moment_series(fock_state(b, 0, 0).density_matrix(sparse=True), t, p).moments
    np.testing.assert_allclose(m[:, 3], np.exp(0.5 * t) - 1, atol=1e-8)


def test_block_and_full_paths_agree():
    p = make_params(J=1, g=0.5, N0=3, gamma_loss=1.0)
    rho0 = product_state(0.7, 1.2, 3, FockBasis(6)).density_matrix()
    t = np.linspace(0, 1, 5)
    a = me.evolve_dense(rho0, t, p, blocks=True, truncation="warn")
    b = me.evolve_dense(rho0, t, p, blocks=False, truncation="warn")
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.dense(), y.dense(), atol=1e-10)


def test_dense_health_invariants():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(20))
    res = me.dense_moment_series(psi.density_matrix(sparse=True), np.linspace(0, 2, 11), p)
    assert np.abs(res.trace - 1).max() < 1e-8
    assert res.min_eigenvalue.min() > -1e-6
    states = me.evolve_dense(psi.density_matrix(sparse=True), [0.0, 1.0], p)
    assert states[-1].hermiticity_residual() < 1e-10


def test_truncation_aborts_long_gain_run():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(8))
    with pytest.raises(TruncationError):
        me.dense_moment_series(psi.density_matrix(sparse=True), np.linspace(0, 3, 7), p)
    with pytest.raises(TruncationError):
        me.run_trajectories(psi, np.linspace(0, 3, 7), p, n_traj=20, seed=1)


def test_trajectory_abort_is_early_and_matches_ensemble_check():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(8))
    t = np.linspace(0, 3, 7)
    with pytest.raises(TruncationError, match="after [0-9]+ of 400"):
        me.run_trajectories(psi, t, p, n_traj=400, seed=1)
    # the same ensemble sampled in full exceeds the abort level on its mean
    smp = me.sample_trajectories(psi, t, p, range(400), seed=1, truncation="warn")
    assert smp.raw[..., 14].mean(axis=0).max() > 1e-4


# ---------------------------------------------------------------- trajectories

def test_no_channels_matches_dense_with_zero_stderr():
    p = make_params(J=1, g=0.6, N0=3, gamma_loss=0)
    psi = product_state(0.4, 1.1, 3, FockBasis(4))
    t = np.linspace(0, 3, 13)
    r = me.run_trajectories(psi, t, p, n_traj=5, seed=3)
    dense = me.dense_moments(me.evolve_dense(psi.density_matrix(), t, p))
    np.testing.assert_allclose(r.means, dense, atol=1e-7)
    assert np.abs(r.stderr).max() < 1e-12
    assert r.n_loss.sum() == 0 and r.n_gain.sum() == 0


def test_vacuum_gain_trajectories():
    p = make_params(J=0, g=0, N0=1, gamma_loss=0.0, balanced=False, gamma_gain=0.5)
    b = FockBasis(60)
    t = np.linspace(0, 2, 5)
    r = me.run_trajectories(fock_state(b, 0, 0), t, p, n_traj=2000, seed=11)
    expect = np.exp(0.5 * t) - 1
    z = np.abs(r.means[1:, 3] - expect[1:]) / r.stderr[1:, 3]
    assert z.max() < 4


def test_jump_count_law():
    # loss only from |N, 0>: each particle is lost independently with prob 1 - exp(-gamma t)
    N, gam, T = 5, 0.7, 1.5
    p = make_params(J=0, g=0, N0=N, gamma_loss=gam, balanced=False, gamma_gain=0.0)
    r = me.run_trajectories(fock_state(FockBasis(N + 1), N, 0), np.array([0.0, T]), p, n_traj=3000,
                            seed=5)
    q = 1 - math.exp(-gam * T)
    counts = np.bincount(r.n_loss, minlength=N + 1)
    expected = 3000 * np.array([math.comb(N, k) * q ** k * (1 - q) ** (N - k) for k in range(N + 1)])
    sigma = np.sqrt(expected * (1 - expected / 3000))
    assert np.all(np.abs(counts - expected) < 3.5 * sigma + 1)
    # mean n1 against the exponential decay law
    assert abs(r.means[-1, 3] - N * math.exp(-gam * T)) < 3 * r.stderr[-1, 3]


def test_determinism_and_chunked_merge():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(40))
    t = np.linspace(0, 1.5, 7)
    a = me.run_trajectories(psi, t, p, n_traj=40, seed=2016)
    b = me.run_trajectories(psi, t, p, n_traj=40, seed=2016)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.stderr, b.stderr)
    parts = [me.sample_trajectories(psi, t, p, idx, seed=2016)
             for idx in (range(25, 40), range(0, 10), range(10, 25))]
    merged = me.merge_samples([parts[1], parts[2], parts[0]])
    c = me.run_trajectories(psi, t, p, n_traj=40, seed=2016, samples=merged)
    assert np.array_equal(a.means, c.means)
    d = me.run_trajectories(psi, t, p, n_traj=40, seed=2017)
    assert not np.array_equal(a.means, d.means)


def test_worker_count_does_not_change_results():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(40))
    t = np.linspace(0, 1.0, 5)
    a = me.run_trajectories(psi, t, p, n_traj=12, seed=9)
    b = me.run_trajectories(psi, t, p, n_traj=12, seed=9, workers=2)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.stderr, b.stderr)


def test_stderr_scaling():
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(40))
    t = np.linspace(0, 1.0, 6)
    small = me.run_trajectories(psi, t, p, n_traj=200, seed=1)
    large = me.run_trajectories(psi, t, p, n_traj=2000, seed=2)
    ratio = np.median(small.stderr[1:, :4] / large.stderr[1:, :4])
    assert abs(ratio / math.sqrt(10) - 1) < 0.2


def test_trajectories_match_dense_on_short_horizon():
    # t <= 2 keeps the ensemble top-shell probability of n_max = 32 under the abort threshold
    p = make_params(J=1, g=0.5, N0=4, gamma_loss=1.0)
    psi = product_state(math.pi / 2, math.pi / 2, 4, FockBasis(32))
    t = np.linspace(0, 2, 21)
    dense = me.dense_moment_series(psi.density_matrix(sparse=True), t, p).moments
    r = me.run_trajectories(psi, t, p, n_traj=1000, seed=2016)
    z = np.abs(r.means[1:] - dense[1:]) / np.maximum(r.stderr[1:], 1e-9 * 4)
    assert np.mean(z > 3) < 0.02
    assert z.max() < 4.5


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 63))
def test_seed_streams_are_distinct(seed):
    a = np.random.default_rng(me.trajectory_seed(seed, 0)).random(4)
    b = np.random.default_rng(me.trajectory_seed(seed, 1)).random(4)
    assert not np.array_equal(a, b)


def test_input_validation():
    p = make_params(N0=2, gamma_loss=0.5)
    psi = product_state(0, 1, 2, FockBasis(10))
    with pytest.raises(ValueError):
        me.run_trajectories(psi, [0, 1], p, n_traj=0)
    with pytest.raises(ValueError):
        me.run_trajectories(psi, [1, 0], p, n_traj=2)
    assert moments_from_state(psi)[3] == pytest.approx(2)
