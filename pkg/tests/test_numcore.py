import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from semplan import numcore as nc


def _layer(w, b, act="identity"):
    return nc.Layer(np.array(w, dtype=float), np.array(b, dtype=float), act)


# ---------------------------------------------------------------- forward

def test_forward_identity_layer():
    net = nc.DenseNet([_layer(np.eye(2), [0, 0])])
    assert np.array_equal(nc.forward(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_forward_row_sum():
    net = nc.DenseNet([_layer([[1, 1]], [0])])
    assert nc.forward(net, np.array([1.0, 2.0]))[0] == 3.0


def test_forward_two_layer_tanh_at_zero_matches_hand_composition():
    net = nc.init_net([3, 4, 2], ["tanh", "identity"], np.random.default_rng(0))
    l1, l2 = net.layers
    l1.bias[:] = [0.1, -0.2, 0.3, 0.05]
    l2.bias[:] = [0.5, -0.5]
    hidden = [math.tanh(b) for b in l1.bias]
    expected = [l2.bias[i] + sum(l2.weight[i, j] * hidden[j] for j in range(4)) for i in range(2)]
    assert np.allclose(nc.forward(net, np.zeros(3)), expected, atol=1e-15)


def test_forward_batch_matches_single(rng):
    net = nc.init_net([3, 5, 2], ["relu", "identity"], rng)
    xs = rng.normal(size=(6, 3))
    batch = nc.forward(net, xs)
    for i in range(6):
        assert np.allclose(nc.forward(net, xs[i]), batch[i], rtol=0, atol=1e-14)


def test_forward_shape_mismatch_rejected(rng):
    net = nc.init_net([3, 2], ["identity"], rng)
    with pytest.raises(nc.ShapeError):
        nc.forward(net, np.zeros(4))


def test_softmax_output_is_distribution(rng):
    net = nc.init_net([4, 6, 5], ["tanh", "softmax"], rng)
    out = nc.forward(net, rng.normal(size=(20, 4)) * 10)
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_only_as_final_activation(rng):
    with pytest.raises(ValueError):
        nc.init_net([2, 3, 1], ["softmax", "identity"], rng)


def test_glorot_bounds(rng):
    net = nc.init_net([10, 30], ["identity"], rng)
    bound = math.sqrt(6 / 40)
    assert np.all(np.abs(net.layers[0].weight) <= bound)


def test_forward_deterministic(rng):
    net = nc.init_net([3, 8, 2], ["tanh", "identity"], rng)
    x = rng.normal(size=3)
    assert np.array_equal(nc.forward(net, x), nc.forward(net, x.copy()))


# ---------------------------------------------------------------- backward

def test_mse_hand_gradient():
    net = nc.DenseNet([_layer([[1.0]], [0.0])])
    g = nc.backward(net, "mse", np.array([1.0]), np.array([0.0]))
    assert g.loss == 1.0
    assert g.weights[0][0, 0] == 2.0
    assert g.biases[0][0] == 2.0


def test_mse_zero_at_own_output(rng):
    net = nc.init_net([3, 4, 2], ["tanh", "identity"], rng)
    x = rng.normal(size=(5, 3))
    g = nc.backward(net, "mse", x, nc.forward(net, x))
    assert g.loss == 0.0
    assert g.norm() == 0.0


def test_unknown_loss_tag(rng):
    net = nc.init_net([2, 1], ["identity"], rng)
    with pytest.raises(ValueError):
        nc.backward(net, "hinge", np.zeros(2), np.zeros(1))


def test_mse_target_shape_mismatch(rng):
    net = nc.init_net([2, 2], ["identity"], rng)
    with pytest.raises(nc.ShapeError):
        nc.backward(net, "mse", np.zeros((3, 2)), np.zeros((3, 3)))


@pytest.mark.parametrize("acts", [["tanh", "identity"], ["relu", "identity"], ["tanh", "softmax"]])
def test_mse_gradient_matches_finite_differences(acts):
    rng = np.random.default_rng(3)
    net = nc.init_net([3, 5, 2], acts, rng)
    # keep relu pre-activations away from the kink
    net.layers[0].bias += 0.3
    x, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    analytic = nc.backward(net, "mse", x, t).flat()
    numeric = nc.numerical_grad(lambda n: nc.backward(n, "mse", x, t).loss, net)
    assert nc.max_relative_error(analytic, numeric) < 1e-4


def test_mdn_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    k, n = 3, 2
    net = nc.init_net([2, 4, k * (1 + 2 * n)], ["tanh", "identity"], rng)
    x, t = rng.normal(size=(5, 2)), rng.normal(size=(5, n))
    for drop_constant in (False, True):
        analytic = nc.backward(net, "mdn_nll", x, t, k_mix=k, drop_constant=drop_constant).flat()
        numeric = nc.numerical_grad(
            lambda m: nc.backward(m, "mdn_nll", x, t, k_mix=k, drop_constant=drop_constant).loss, net)
        assert nc.max_relative_error(analytic, numeric) < 1e-4


def test_mdn_aux_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    k, n = 2, 3
    net = nc.init_net([3, 4, k * (1 + 2 * n)], ["tanh", "identity"], rng)
    x, t = rng.normal(size=(4, 3)), rng.normal(size=(4, n))
    aux = (rng.normal(size=(2, n)), rng.normal(size=(4, n)), rng.normal(size=(4, 2)))
    analytic = nc.backward(net, "mdn_nll_aux", x, t, k_mix=k, aux=aux).flat()
    numeric = nc.numerical_grad(lambda m: nc.backward(m, "mdn_nll_aux", x, t, k_mix=k, aux=aux).loss, net)
    assert nc.max_relative_error(analytic, numeric) < 1e-4


def test_mdn_nll_matches_scipy_mixture(rng):
    k, n = 3, 2
    out = rng.normal(size=(1, k * (1 + 2 * n)))
    t = rng.normal(size=(1, n))
    logits, mu, ls = nc.split_mdn_output(out, k)
    phi = np.exp(logits[0] - nc.logsumexp(logits[0]))
    dens = sum(phi[j] * multivariate_normal(mu[0, j], np.diag(np.exp(2 * ls[0, j]))).pdf(t[0]) for j in range(k))
    loss, _ = nc.mdn_nll_and_grad(out, t, k)
    assert loss == pytest.approx(-math.log(dens), rel=1e-10)


def test_mdn_nll_far_target_is_finite():
    k, n = 2, 2
    out = np.zeros((1, k * (1 + 2 * n)))
    out[0, k + k * n:] = nc.LOG_SIGMA_MIN
    loss, grad = nc.mdn_nll_and_grad(out, np.full((1, n), 50.0), k)
    assert math.isfinite(loss) and np.all(np.isfinite(grad))


def test_mdn_layout_checked():
    with pytest.raises(nc.ShapeError):
        nc.split_mdn_output(np.zeros((1, 7)), 2)


# ---------------------------------------------------------------- sgd

def test_sgd_single_step():
    net = nc.DenseNet([_layer([[1.0]], [0.0])])
    grads = nc.GradBundle(0.0, [np.array([[2.0]])], [np.array([0.0])])
    out = nc.sgd_step(net, grads, 0.1, clip=None)
    assert out.layers[0].weight[0, 0] == pytest.approx(0.8, abs=1e-15)
    assert net.layers[0].weight[0, 0] == 1.0  # not in place by default


def test_sgd_zero_grad_unchanged(rng):
    net = nc.init_net([3, 2], ["identity"], rng)
    grads = nc.GradBundle(0.0, [np.zeros((2, 3))], [np.zeros(2)])
    assert np.array_equal(nc.sgd_step(net, grads, 0.5).flat_params(), net.flat_params())


def test_sgd_converges_on_quadratic():
    # minimise (w*1 + b - 3)^2 + fixed point: minimiser w + b = 3
    net = nc.DenseNet([_layer([[0.0]], [0.0])])
    x, t = np.array([[1.0], [2.0]]), np.array([[3.0], [5.0]])  # w=2, b=1
    for _ in range(5000):
        nc.sgd_step(net, nc.backward(net, "mse", x, t), 0.05, inplace=True)
    assert net.layers[0].weight[0, 0] == pytest.approx(2.0, abs=1e-6)
    assert net.layers[0].bias[0] == pytest.approx(1.0, abs=1e-6)


def test_sgd_clips_global_norm():
    net = nc.DenseNet([_layer([[0.0, 0.0]], [0.0])])
    grads = nc.GradBundle(0.0, [np.array([[30.0, 40.0]])], [np.array([0.0])])  # norm 50
    out = nc.sgd_step(net, grads, 1.0, clip=5.0)
    assert np.allclose(out.layers[0].weight, [[-3.0, -4.0]])


def test_sgd_non_finite_aborts(rng):
    net = nc.init_net([2, 1], ["identity"], rng)
    grads = nc.GradBundle(float("nan"), [np.zeros((1, 2))], [np.zeros(1)])
    with pytest.raises(nc.TrainingDiverged):
        nc.sgd_step(net, grads, 0.1)


def test_sgd_rejects_bad_lr(rng):
    net = nc.init_net([2, 1], ["identity"], rng)
    with pytest.raises(ValueError):
        nc.sgd_step(net, nc.backward(net, "mse", np.zeros(2), np.zeros(1)), 0.0)


# ------------------------------------------------------- gaussian log-density

def test_logpdf_standard_at_mean():
    assert nc.gaussian_logpdf_diag([0.0], [0.0], [1.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_logpdf_drop_constant_at_mean():
    assert nc.gaussian_logpdf_diag([1.0, 2.0], [1.0, 2.0], [1.0, 1.0], drop_constant=True) == 0.0


def test_logpdf_drop_constant_unit_offset():
    assert nc.gaussian_logpdf_diag([1.0], [0.0], [1.0], drop_constant=True) == -0.5


def test_logpdf_matches_scipy(rng):
    x, mu, sigma = rng.normal(size=4), rng.normal(size=4), rng.uniform(0.2, 2, size=4)
    ref = multivariate_normal(mu, np.diag(sigma ** 2)).logpdf(x)
    assert nc.gaussian_logpdf_diag(x, mu, sigma) == pytest.approx(ref, rel=1e-12)


def test_logpdf_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        nc.gaussian_logpdf_diag([0.0], [0.0], [0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.floats(0.1, 3), st.floats(0.01, 2))
def test_logpdf_maximised_at_mean(mu, sigma, shift):
    mu = np.array(mu)
    sig = np.full(mu.size, sigma)
    at_mean = nc.gaussian_logpdf_diag(mu, mu, sig)
    assert nc.gaussian_logpdf_diag(mu + shift, mu, sig) < at_mean


# ---------------------------------------------------------------- flat params

def test_flat_round_trip(rng):
    net = nc.init_net([3, 4, 2], ["tanh", "identity"], rng)
    back = nc.net_from_flat(net.shapes, net.activations, net.flat_params())
    assert np.array_equal(back.flat_params(), net.flat_params())
    assert net.n_params() == 3 * 4 + 4 + 4 * 2 + 2


def test_flat_wrong_count(rng):
    net = nc.init_net([3, 2], ["identity"], rng)
    with pytest.raises(ValueError):
        nc.net_from_flat(net.shapes, net.activations, net.flat_params()[:-1])


def test_mdn_aux_rejects_wide_reward_matrix():
    k, n = 1, 1
    out = np.zeros((1, k * (1 + 2 * n)))
    aux = (np.ones((2, 1)), np.zeros((1, 1)), np.zeros((1, 2)))
    with pytest.raises(nc.ShapeError, match="rows"):
        nc.mdn_nll_and_grad(out, np.zeros((1, 1)), k, aux=aux)


def test_mdn_aux_rejects_rank_deficient_reward_matrix():
    out = np.zeros((1, 1 + 2 * 2))
    aux = (np.ones((2, 2)), np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError, match="singular"):
        nc.mdn_nll_and_grad(out, np.zeros((1, 2)), 1, aux=aux)


def test_fourth_order_stencil_is_more_precise_on_smooth_nets():
    rng = np.random.default_rng(5)
    net = nc.init_net([3, 5, 2], ["tanh", "identity"], rng)
    x, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    fn = lambda m: nc.backward(m, "mse", x, t).loss
    analytic = nc.backward(net, "mse", x, t).flat()
    assert nc.max_relative_error(analytic, nc.numerical_grad(fn, net, order=4)) < 1e-8
    with pytest.raises(ValueError):
        nc.numerical_grad(fn, net, order=3)
