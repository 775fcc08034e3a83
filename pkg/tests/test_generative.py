import numpy as np
import pytest
from scipy.integrate import trapezoid

from dpfb import autodiff as ad
from dpfb.generative import (GenerativeModel, GenerativeSpec, ParticleEnsemble, data_log_likelihood, decode,
                             initial_ensemble, label_log_likelihood, prior_step)
from dpfb.nn import as_leaves
from dpfb.oracle import finite_diff_grad, relative_error

SPEC = GenerativeSpec(3, 2, 5, latent_hidden=(6,), latent_features=4, prior_hidden=(7, 5), decoder_hidden=(6,))


def leaky(a):
    return np.where(a >= 0, a, 0.01 * a)


def softplus(a):
    return np.logaddexp(0, a)


def random_ensemble(rng, rows, groups=1):
    return ParticleEnsemble(ad.constant(rng.normal(size=(rows, 2))),
                            ad.constant(np.tanh(rng.normal(size=(rows, 5)))), groups)


def test_zero_noise_gives_prior_mean(rng):
    model = GenerativeModel.create(SPEC, 1)
    ens, mu, _ = prior_step(model, random_ensemble(rng, 4), np.zeros((4, 2)))
    np.testing.assert_array_equal(ens.z.value, mu.value)


def test_identical_particles_identical_outputs(rng):
    model = GenerativeModel.create(SPEC, 1)
    z, h = rng.normal(size=(1, 2)), np.tanh(rng.normal(size=(1, 5)))
    prev = ParticleEnsemble(ad.constant(np.repeat(z, 2, 0)), ad.constant(np.repeat(h, 2, 0)))
    noise = np.repeat(rng.normal(size=(1, 2)), 2, 0)
    ens, mu, sigma = prior_step(model, prev, noise)
    for arr in (ens.z.value, ens.h.value, mu.value, sigma.value):
        np.testing.assert_array_equal(arr[0], arr[1])


def test_prior_monte_carlo_mean(rng):
    model = GenerativeModel.create(SPEC, 2)
    n = 10_000
    prev = initial_ensemble(n, 2, 5)
    ens, mu, sigma = prior_step(model, prev, rng.standard_normal((n, 2)))
    tol = 3 * sigma.value[0] / np.sqrt(n)
    assert np.all(np.abs(ens.z.value.mean(axis=0) - mu.value[0]) < tol)


def test_noise_shape_checked(rng):
    with pytest.raises(ad.ShapeError):
        prior_step(GenerativeModel.create(SPEC), random_ensemble(rng, 4), np.zeros((3, 2)))


def test_ensemble_shape_checks():
    with pytest.raises(ad.ShapeError):
        ParticleEnsemble(np.zeros((4, 2)), np.zeros((3, 5)))
    with pytest.raises(ad.ShapeError):
        ParticleEnsemble(np.zeros((5, 2)), np.zeros((5, 5)), groups=2)


def test_zero_decoder_closed_form(rng):
    model = GenerativeModel.create(SPEC, 0)
    params = {k: (np.zeros_like(v) if k.startswith("decoder") else v) for k, v in model.params.items()}
    mu, sigma = decode(GenerativeModel(SPEC, params), random_ensemble(rng, 6))
    np.testing.assert_array_equal(mu.value, 0.0)
    np.testing.assert_allclose(sigma.value, np.log(2.0) + 1e-4, rtol=0, atol=1e-15)


def test_decoder_permutation_equivariant(rng):
    model = GenerativeModel.create(SPEC, 3)
    ens = random_ensemble(rng, 7)
    perm = rng.permutation(7)
    shuffled = ParticleEnsemble(ad.constant(ens.z.value[perm]), ad.constant(ens.h.value[perm]))
    for a, b in zip(decode(model, ens), decode(model, shuffled)):
        np.testing.assert_array_equal(a.value[perm], b.value)


def test_decoder_matches_straight_line(rng):
    model = GenerativeModel.create(SPEC, 4)
    p = model.params
    ens = random_ensemble(rng, 5)
    feat = leaky(ens.z.value @ p["latent_enc.0.W"] + p["latent_enc.0.b"]) @ p["latent_enc.1.W"] + p["latent_enc.1.b"]
    trunk = leaky(np.hstack([feat, ens.h.value]) @ p["decoder.trunk.0.W"] + p["decoder.trunk.0.b"])
    mu = trunk @ p["decoder.mu.W"] + p["decoder.mu.b"]
    sigma = softplus(trunk @ p["decoder.sigma.W"] + p["decoder.sigma.b"]) + 1e-4
    got_mu, got_sigma = decode(model, ens)
    np.testing.assert_allclose(got_mu.value, mu, rtol=0, atol=1e-12)
    np.testing.assert_allclose(got_sigma.value, sigma, rtol=0, atol=1e-12)


@pytest.mark.parametrize("loglik", [label_log_likelihood, data_log_likelihood])
def test_log_likelihood_standard_normal_at_mode(loglik):
    assert loglik(np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1))).value[0] == pytest.approx(-0.9189385332, abs=1e-9)


@pytest.mark.parametrize("loglik", [label_log_likelihood, data_log_likelihood])
def test_log_likelihood_integrates_to_one(loglik):
    grid = np.linspace(-12, 14, 20001)[:, None]
    dens = np.exp(loglik(np.full_like(grid, 1.0), np.full_like(grid, 1.5), grid).value)
    assert trapezoid(dens, grid[:, 0]) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("loglik", [label_log_likelihood, data_log_likelihood])
def test_doubling_sigma_at_mode_costs_log2_per_dim(loglik, rng):
    mu = rng.normal(size=(1, 3))
    s = np.abs(rng.normal(size=(1, 3))) + 0.1
    base = loglik(mu, s, mu).value[0]
    assert base - loglik(mu, 2 * s, mu).value[0] == pytest.approx(3 * np.log(2), abs=1e-12)


def test_mean_log_likelihood_gradient_finite_differences(rng):
    model = GenerativeModel.create(SPEC, 5)
    ens = random_ensemble(rng, 6)
    x = rng.normal(size=(6, 3))

    def score(params):
        mu, sigma = decode(GenerativeModel(SPEC, params), ens)
        return ad.mean(data_log_likelihood(mu, sigma, x))
    leaves = as_leaves(model.params)
    grads = ad.backward(ad.Graph.of(score(leaves)))
    for name, value in model.params.items():
        if name.startswith(("gru", "prior")):
            continue  # not used by decode
        fd = finite_diff_grad(lambda v: float(score({**model.params, name: v}).value), value)
        assert relative_error(grads[leaves[name]], fd) < 1e-5, name


def test_unroll_deterministic_given_noise(rng):
    model = GenerativeModel.create(SPEC, 6)
    noise = rng.normal(size=(5, 4, 2))

    def unroll():
        ens = initial_ensemble(4, 2, 5)
        for n in range(5):
            ens, _, _ = prior_step(model, ens, noise[n])
        return ens.values()
    a, b = unroll(), unroll()
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
