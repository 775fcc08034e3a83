import numpy as np
import pytest

from dpfb import autodiff as ad
from dpfb import gradcheck
from dpfb.nn import (SIGMA_FLOOR, FcnnSpec, GaussianHead, GruSpec, fcnn_apply, gaussian_head_apply, gru_step,
                     init_fcnn, init_gru, init_head, reparameterize)


def leaky(a):
    return np.where(a >= 0, a, 0.01 * a)


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def test_identity_layer_passes_positive_input():
    spec = FcnnSpec((3, 3), activate_output=True)
    params = {"fcnn.0.W": np.eye(3), "fcnn.0.b": np.zeros(3)}
    x = np.array([[0.5, 1.0, 2.0]])
    np.testing.assert_array_equal(fcnn_apply(spec, params, x).value, x)


def test_fcnn_matches_straight_line(rng):
    spec = FcnnSpec((4, 6, 5, 2), "f")
    p = init_fcnn(spec, rng)
    x = rng.normal(size=(7, 4))
    h = leaky(x @ p["f.0.W"] + p["f.0.b"])
    h = leaky(h @ p["f.1.W"] + p["f.1.b"])
    ref = h @ p["f.2.W"] + p["f.2.b"]
    np.testing.assert_allclose(fcnn_apply(spec, p, x).value, ref, rtol=0, atol=1e-12)


def test_fcnn_rejects_bad_widths(rng):
    with pytest.raises(ValueError):
        FcnnSpec((3,))
    with pytest.raises(ValueError):
        FcnnSpec((3, 0, 2))
    spec = FcnnSpec((3, 2))
    with pytest.raises(ad.ShapeError):
        fcnn_apply(spec, init_fcnn(spec, rng), np.ones((1, 4)))


def test_init_range(rng):
    spec = FcnnSpec((9, 16))
    p = init_fcnn(spec, rng)
    assert np.all(np.abs(p["fcnn.0.W"]) <= 1 / 3) and np.all(np.abs(p["fcnn.0.b"]) <= 1 / 3)


def test_gru_zero_fixed_point():
    spec = GruSpec(3, 4)
    params = {k: np.zeros_like(v) for k, v in init_gru(spec, np.random.default_rng(0)).items()}
    h = gru_step(spec, params, np.ones((2, 3)), np.zeros((2, 4)))
    np.testing.assert_array_equal(h.value, np.zeros((2, 4)))


def test_gru_matches_documented_equations(rng):
    spec = GruSpec(3, 4)
    p = init_gru(spec, rng)
    x, h = rng.normal(size=(5, 3)), np.tanh(rng.normal(size=(5, 4)))
    gi, gh = x @ p["gru.W_i"] + p["gru.b_i"], h @ p["gru.W_h"] + p["gru.b_h"]
    r = sigmoid(gi[:, :4] + gh[:, :4])
    u = sigmoid(gi[:, 4:8] + gh[:, 4:8])
    c = np.tanh(gi[:, 8:] + r * gh[:, 8:])
    np.testing.assert_allclose(gru_step(spec, p, x, h).value, (1 - u) * c + u * h, rtol=0, atol=1e-12)


def test_gru_state_bounded(rng):
    spec = GruSpec(2, 6)
    p = {k: 3 * v for k, v in init_gru(spec, rng).items()}
    h = np.zeros((50, 6))
    for _ in range(20):
        h = gru_step(spec, p, 3 * rng.normal(size=(50, 2)), h).value
        assert np.max(np.abs(h)) < 1


def test_gru_state_saturates_at_one_in_float64(rng):
    # tanh rounds to exactly +-1 for huge arguments; the bound can only be closed
    spec = GruSpec(2, 6)
    p = {k: 10 * v for k, v in init_gru(spec, rng).items()}
    h = np.zeros((50, 6))
    for _ in range(20):
        h = gru_step(spec, p, 100 * rng.normal(size=(50, 2)), h).value
        assert np.max(np.abs(h)) <= 1


def test_gru_contractive_fixed_point(rng):
    spec = GruSpec(3, 5)
    p = {k: 0.1 * v for k, v in init_gru(spec, rng).items()}
    x = rng.normal(size=(1, 3))
    h = np.zeros((1, 5))
    for _ in range(500):
        h_next = gru_step(spec, p, x, h).value
        step = np.linalg.norm(h_next - h)
        h = h_next
    assert step < 1e-8


def test_gru_width_mismatch(rng):
    spec = GruSpec(3, 4)
    with pytest.raises(ad.ShapeError):
        gru_step(spec, init_gru(spec, rng), np.ones((1, 2)), np.zeros((1, 4)))


@pytest.mark.parametrize("case", ["fcnn", "gru", "gaussian_head"])
def test_parameterised_ops_pass_finite_differences(case):
    for result in gradcheck.run(0, [case]):
        assert result.passed, result.line()


def test_zero_head_closed_form():
    head = GaussianHead(3, (4,), 2)
    params = {k: np.zeros_like(v) for k, v in init_head(head, np.random.default_rng(0)).items()}
    mu, sigma = gaussian_head_apply(head, params, np.ones((5, 3)))
    np.testing.assert_array_equal(mu.value, 0.0)
    np.testing.assert_allclose(sigma.value, np.log(2.0) + 1e-4, rtol=0, atol=1e-15)


def test_head_sigma_positive_on_sweep(rng):
    head = GaussianHead(3, (8,), 2)
    params = {k: 5 * v for k, v in init_head(head, rng).items()}
    _, sigma = gaussian_head_apply(head, params, 20 * rng.normal(size=(10_000, 3)))
    assert np.all(sigma.value >= SIGMA_FLOOR)


def test_head_mean_is_mean_branch(rng):
    head = GaussianHead(3, (8, 4), 2)
    params = init_head(head, rng)
    x = rng.normal(size=(6, 3))
    mu, _ = gaussian_head_apply(head, params, x)
    branch = fcnn_apply(head.mean_branch(), head.mean_branch_params(params), x)
    np.testing.assert_allclose(mu.value, branch.value, rtol=0, atol=1e-12)


def test_reparameterize_trivial_cases(rng):
    mu, sigma, eps = rng.normal(size=(4, 2)), np.abs(rng.normal(size=(4, 2))), rng.normal(size=(4, 2))
    np.testing.assert_array_equal(reparameterize(mu, sigma, np.zeros((4, 2))).value, mu)
    np.testing.assert_array_equal(reparameterize(np.zeros((4, 2)), np.ones((4, 2)), eps).value, eps)


def test_reparameterize_monte_carlo(rng):
    n, mu, sigma = 100_000, 0.7, 1.9
    s = reparameterize(np.full((n, 1), mu), np.full((n, 1), sigma), rng.standard_normal((n, 1))).value
    assert abs(s.mean() - mu) < 3 * sigma / np.sqrt(n)
    # the sample std has standard error about sigma / sqrt(2n)
    assert abs(s.std() - sigma) < 3 * sigma / np.sqrt(2 * n)


def test_reparameterize_differentiable():
    mu, sigma = ad.leaf(np.array([1.0])), ad.leaf(np.array([2.0]))
    out = ad.sum(reparameterize(mu, sigma, np.array([0.5])))
    g = ad.backward(ad.Graph.of(out))
    assert g[mu][0] == 1.0 and g[sigma][0] == 0.5


def test_tanh_activation_option(rng):
    spec = FcnnSpec((2, 3, 1), "f", activation="tanh")
    p = init_fcnn(spec, rng)
    x = rng.normal(size=(4, 2))
    ref = np.tanh(x @ p["f.0.W"] + p["f.0.b"]) @ p["f.1.W"] + p["f.1.b"]
    np.testing.assert_allclose(fcnn_apply(spec, p, x).value, ref, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        FcnnSpec((2, 1), activation="relu6")
