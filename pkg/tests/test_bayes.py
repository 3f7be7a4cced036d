import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from eitoed.bayes import GaussianDensity, NoiseModel, noise_std, posterior, squared_exp_prior
from eitoed.errors import NumericalError, ParameterError
from eitoed.forward import measurement_map
from eitoed.mesh import mass_matrix
from eitoed.oed import a_target

from oracles import information_posterior, random_spd


def test_prior_diagonal_and_kernel_value():
    x = np.array([[0.0, 0, 0], [0.05, 0.05, 0], [1.0, 0, 0]])
    p = squared_exp_prior(x, 0.05, 0.2)
    jit = 1e-10 * 0.04
    assert p.jitter == pytest.approx(jit)
    assert np.allclose(np.diag(p.covariance) - jit, 0.04, rtol=0, atol=1e-17)
    # |x_i - x_j| = l sqrt(2)
    assert p.covariance[0, 1] == pytest.approx(0.04 * np.exp(-1), rel=1e-14)
    assert np.all(p.mean == 0)


def test_prior_factorizes_on_desk_mesh(desk_mesh):
    p = squared_exp_prior(desk_mesh.nodes, 0.05, 0.2)
    sla.cho_factor(p.covariance)
    p.check()


def test_prior_rejects_bad_parameters():
    with pytest.raises(ParameterError):
        squared_exp_prior(np.zeros((2, 3)), 0.0, 0.2)


def test_noise_level_from_range():
    y = np.array([-1.0, 0.3, 1.0])
    assert noise_std(y, 1e-3).std == pytest.approx(2e-3, rel=1e-15)


@given(st.floats(-1e3, 1e3))
def test_noise_level_shift_invariant(c):
    y = np.array([-1.0, 0.3, 1.0])
    assert noise_std(y + c, 1e-3).std == pytest.approx(noise_std(y, 1e-3).std, rel=1e-9)


def test_constant_measurement_rejected():
    with pytest.raises(NumericalError):
        noise_std(np.ones(5))


def test_noise_from_symmetric_background_positive(desk_mesh, background, sym_layout, sphere):
    U = measurement_map(desk_mesh, background, sym_layout, sphere)
    assert noise_std(U, 1e-3).std > 0


def test_no_information_returns_prior():
    rng = np.random.default_rng(0)
    C = random_spd(rng, 6)
    C = 0.5 * (C + C.T)
    prior = GaussianDensity(np.zeros(6), C)
    post = posterior(np.zeros((3, 6)), prior, NoiseModel(0.1), np.ones(3))
    assert np.array_equal(post.covariance, C)
    assert np.all(post.mean == 0)


def test_scalar_case():
    post = posterior(np.ones((1, 1)), GaussianDensity([0.0], [[1.0]]), NoiseModel(1.0), np.array([1.0]))
    assert post.covariance[0, 0] == pytest.approx(0.5, rel=1e-15)
    assert post.mean[0] == pytest.approx(0.5, rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_matches_information_form(seed):
    rng = np.random.default_rng(seed)
    n, m = 50, 20
    C = random_spd(rng, n, 1e2)
    J = rng.standard_normal((m, n))
    y = rng.standard_normal(m)
    mean0 = rng.standard_normal(n)
    post = posterior(J, GaussianDensity(mean0, C), NoiseModel(0.3), y)
    mref, Cref = information_posterior(J, C, 0.09, y, mean0)
    assert np.linalg.norm(post.covariance - Cref) <= 1e-8 * np.linalg.norm(Cref)
    assert np.linalg.norm(post.mean - mref) <= 1e-8 * np.linalg.norm(mref)


def test_covariance_independent_of_data():
    rng = np.random.default_rng(1)
    prior = GaussianDensity(np.zeros(20), random_spd(rng, 20))
    J = rng.standard_normal((8, 20))
    a = posterior(J, prior, NoiseModel(0.2), rng.standard_normal(8))
    b = posterior(J, prior, NoiseModel(0.2), rng.standard_normal(8))
    assert np.array_equal(a.covariance, b.covariance)


def test_weighted_trace_never_increases(desk_mesh):
    # Loewner ordering with a mass-matrix weight
    rng = np.random.default_rng(2)
    idx = np.sort(rng.choice(desk_mesh.n_nodes, 60, replace=False))
    prior = squared_exp_prior(desk_mesh.nodes[idx], 0.05, 0.2, dofs=idx)
    W = mass_matrix(desk_mesh)[idx][:, idx]
    J = rng.standard_normal((15, 60))
    post = posterior(J, prior, NoiseModel(0.05))
    assert (W.multiply(post.covariance)).sum() <= (W.multiply(prior.covariance)).sum()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_extra_measurement_row_never_hurts(seed):
    rng = np.random.default_rng(seed)
    n = 12
    prior = GaussianDensity(np.zeros(n), random_spd(rng, n, 10))
    W = random_spd(rng, n, 10)
    J = rng.standard_normal((4, n))
    J2 = np.vstack([J, rng.standard_normal((1, n))])
    noise = NoiseModel(0.5)
    a = a_target(J, prior, noise, W)
    b = a_target(J2, prior, noise, W)
    assert b <= a * (1 + 1e-12)


def test_posterior_is_symmetric_psd():
    rng = np.random.default_rng(5)
    prior = GaussianDensity(np.zeros(30), random_spd(rng, 30))
    post = posterior(rng.standard_normal((10, 30)), prior, NoiseModel(0.1))
    post.check()


def test_density_dump_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    d = GaussianDensity(rng.standard_normal(7), random_spd(rng, 7), np.arange(10, 17), 1e-9)
    p = tmp_path / "d.bin"
    d.save(p, tag="abc")
    back = GaussianDensity.load(p)
    assert np.array_equal(back.mean, d.mean)
    assert np.array_equal(back.covariance, d.covariance)
    assert np.array_equal(back.dofs, d.dofs)
    assert back.jitter == d.jitter and back.meta["tag"] == "abc"
