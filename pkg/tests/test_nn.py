"""Network, Gaussian head, and optimizer unit tests.

The finite-difference checks here are the foundation everything else rests
on: if backprop is right, the PPO surrogate and discriminator loss gradients
built from it only need their own chain-rule steps verified.
"""

import numpy as np
import pytest

from simadapt.errors import ContractViolationError
from simadapt.nn import (
    Adam,
    GaussianHead,
    MlpNet,
    clamp_log_sigma,
    finite_difference_gradients,
    gaussian_log_prob,
    log_sigma_grad_mask,
    max_relative_error,
    net_from_dict,
    net_to_dict,
    standard_normal_log_prob,
)


# -- forward pass oracles -----------------------------------------------------


def test_zero_network_outputs_zeros():
    net = MlpNet([3, 5, 2])
    out = net.forward(np.array([0.3, -1.2, 0.7]))
    assert out.shape == (2,)
    assert np.allclose(out, 0.0)


def test_identity_linear_layer():
    net = MlpNet([2, 2])
    net.weights[0] = np.eye(2)
    net.biases[0] = np.zeros(2)
    out = net.forward(np.array([1.0, 2.0]))
    assert np.allclose(out, [1.0, 2.0])


def test_seeded_242_matches_hand_rolled_matmul():
    rng = np.random.default_rng(7)
    net = MlpNet([2, 4, 2], rng=rng)
    x = np.array([0.5, -0.25])
    expected = np.tanh(x @ net.weights[0] + net.biases[0]) @ net.weights[1] + net.biases[1]
    assert np.allclose(net.forward(x), expected, atol=1e-12)


def test_batch_forward_matches_loop():
    rng = np.random.default_rng(3)
    net = MlpNet([3, 8, 8, 2], rng=rng)
    xs = rng.standard_normal((5, 3))
    batch = net.forward(xs)
    rows = np.stack([net.forward(x) for x in xs])
    assert np.allclose(batch, rows, atol=1e-12)


def test_forward_rejects_wrong_width():
    net = MlpNet([3, 4, 1])
    with pytest.raises(ContractViolationError):
        net.forward(np.zeros(2))


# -- backward pass -------------------------------------------------------------


def test_backward_before_forward_raises():
    net = MlpNet([2, 3, 1])
    with pytest.raises(ContractViolationError):
        net.backward(np.array([1.0]))


def test_linear_chain_rule_bias_gradient():
    # One linear layer, loss = sum(outputs): d loss / d b = 1 exactly.
    net = MlpNet([2, 2])
    net.weights[0] = np.array([[1.0, 0.5], [-0.5, 2.0]])
    net.forward(np.array([0.3, 0.4]))
    grads, _ = net.backward(np.ones(2))
    assert np.allclose(grads[1], [1.0, 1.0])


def test_constant_loss_gives_zero_grads():
    rng = np.random.default_rng(0)
    net = MlpNet([3, 6, 2], rng=rng)
    net.forward(rng.standard_normal(3))
    grads, dx = net.backward(np.zeros(2))
    assert all(np.allclose(g, 0.0) for g in grads)
    assert np.allclose(dx, 0.0)


@pytest.mark.parametrize("sizes", [[2, 1], [3, 5, 2], [4, 8, 8, 3], [1, 16, 1]])
def test_gradients_match_finite_differences(sizes):
    rng = np.random.default_rng(hash(tuple(sizes)) % (2**32))
    net = MlpNet(sizes, rng=rng)
    xs = rng.standard_normal((4, sizes[0]))
    target = rng.standard_normal((4, sizes[-1]))

    def loss():
        return float(0.5 * np.sum((net.forward(xs) - target) ** 2))

    loss()
    analytic, _ = net.backward(net._cache[-1] - target)
    numeric = finite_difference_gradients(loss, net.params(), eps=1e-5)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = MlpNet([3, 7, 2], rng=rng)
    x = rng.standard_normal(3)

    def loss():
        return float(np.sum(net.forward(x) ** 2))

    loss()
    _, dx = net.backward(2.0 * net._cache[-1])
    numeric = finite_difference_gradients(loss, [x], eps=1e-5)[0]
    assert max_relative_error([dx], [numeric]) < 1e-4


# -- Gaussian head --------------------------------------------------------------


def test_standard_normal_log_prob_at_zero():
    # -0.5 * ln(2*pi) per dimension.
    assert gaussian_log_prob(np.zeros(1), np.zeros(1), np.zeros(1)) == pytest.approx(
        -0.9189385332046727, abs=1e-9
    )
    assert standard_normal_log_prob(np.zeros(3)) == pytest.approx(
        3 * -0.9189385332046727, abs=1e-9
    )


def test_two_dim_log_prob_at_mean():
    mu = np.array([1.0, -1.0])
    log_sigma = np.log(np.array([0.5, 0.5]))
    head = GaussianHead(mu, log_sigma)
    # -ln(2*pi) - 2*ln(0.5) = -0.45158270528945...
    assert head.log_prob(mu) == pytest.approx(-0.4515827052894548, abs=1e-9)


def test_log_sigma_clamp_band():
    raw = np.array([-9.0, -5.0, 0.0, 2.0, 4.0])
    clamped = clamp_log_sigma(raw)
    assert np.allclose(clamped, [-5.0, -5.0, 0.0, 2.0, 2.0])
    assert np.allclose(log_sigma_grad_mask(raw), [0.0, 0.0, 1.0, 0.0, 0.0])


def test_tiny_sigma_sample_collapses_to_mean():
    head = GaussianHead(np.array([0.7, -0.2]), np.full(2, -20.0))
    assert np.allclose(head.log_sigma, -5.0)

    class ZeroRng:
        def standard_normal(self, shape):
            return np.zeros(shape)

    sample, _ = head.sample(ZeroRng())
    assert np.allclose(sample, head.mu)


def test_sample_log_prob_is_recomputable():
    rng = np.random.default_rng(5)
    head = GaussianHead(rng.standard_normal(4), rng.uniform(-1, 0.5, 4))
    sample, lp = head.sample(rng)
    assert lp == pytest.approx(head.log_prob(sample), abs=1e-12)


def test_log_prob_grads_match_finite_differences():
    rng = np.random.default_rng(13)
    mu = rng.standard_normal(3)
    log_sigma = rng.uniform(-1.0, 0.5, 3)
    x = rng.standard_normal(3)
    d_mu, d_ls = GaussianHead(mu, log_sigma).log_prob_grads(x)

    def lp():
        return GaussianHead(mu, log_sigma).log_prob(x)

    numeric = finite_difference_gradients(lp, [mu, log_sigma], eps=1e-5)
    assert max_relative_error([d_mu, d_ls], numeric) < 1e-4


def test_entropy_increases_with_sigma():
    lo = GaussianHead(np.zeros(2), np.full(2, -1.0)).entropy()
    hi = GaussianHead(np.zeros(2), np.full(2, 0.5)).entropy()
    assert hi > lo


# -- optimizer -------------------------------------------------------------------


def test_adam_zero_grad_is_noop():
    rng = np.random.default_rng(2)
    net = MlpNet([2, 4, 1], rng=rng)
    before = [p.copy() for p in net.params()]
    opt = Adam(net.params(), lr=0.1)
    params = net.params()
    opt.step(params, [np.zeros_like(p) for p in params])
    assert all(np.allclose(b, a) for b, a in zip(before, net.params()))


def test_adam_descends_quadratic():
    p = [np.array([5.0])]
    opt = Adam(p, lr=0.3)
    for _ in range(300):
        opt.step(p, [2.0 * p[0]])
    assert abs(p[0][0]) < 1e-2


def test_adam_rejects_mismatched_lists():
    p = [np.zeros(3)]
    opt = Adam(p, lr=0.1)
    with pytest.raises(ContractViolationError):
        opt.step(p, [np.zeros(3), np.zeros(2)])


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip():
    rng = np.random.default_rng(9)
    net = MlpNet([3, 6, 6, 2], rng=rng)
    clone = net_from_dict(net_to_dict(net))
    x = rng.standard_normal(3)
    assert np.allclose(net.forward(x), clone.forward(x), atol=0)


def test_checkpoint_rejects_inconsistent_shapes():
    net = MlpNet([2, 3, 1])
    d = net_to_dict(net)
    d["weights"][0] = [[1.0, 2.0]]
    with pytest.raises(ContractViolationError):
        net_from_dict(d)


def test_seeded_init_is_reproducible_and_bounded():
    a = MlpNet([4, 8, 2], rng=np.random.default_rng(21))
    b = MlpNet([4, 8, 2], rng=np.random.default_rng(21))
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    assert np.max(np.abs(a.weights[0])) <= 1.0 / np.sqrt(4)
    assert np.max(np.abs(a.weights[1])) <= 1.0 / np.sqrt(8)
    assert np.allclose(a.biases[0], 0.0)
