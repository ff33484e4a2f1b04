"""Kernel, Stein direction, amortized sampler gradient and sampler density."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softql.core import make_q_network
from softql.errors import InvalidInputError
from softql.nn import Adam, MlpParams, mlp_backward
from softql.svgd import (
    BANDWIDTH_FLOOR,
    SamplerNetwork,
    SvgdBatch,
    _batched_median_bandwidth,
    action_log_density,
    action_log_densities,
    amortized_policy_gradient,
    median_bandwidth,
    rbf_kernel,
    sample_actions,
    stein_direction,
)


def double_loop_direction(actions, tilde, q_grads, h, alpha):
    """Stein direction written directly from its definition, one pair at a time."""
    m, d = actions.shape
    out = np.zeros((tilde.shape[0], d))
    for j in range(tilde.shape[0]):
        for i in range(m):
            diff = actions[i] - tilde[j]
            k = math.exp(-float(diff @ diff) / h)
            out[j] += k * q_grads[i] - alpha * (2.0 / h) * diff * k
        out[j] /= m
    return out


def linear_sampler(phi_state, phi_noise):
    params = MlpParams([np.array([[phi_state], [phi_noise]])], [np.zeros(1)])
    return SamplerNetwork(params, 1, 1)


class TestBandwidth:
    def test_single_pair(self):
        assert median_bandwidth(np.array([[0.0], [1.0]])) == pytest.approx(1 / (2 * math.log(3)), abs=1e-15)
        assert median_bandwidth(np.array([[0.0], [1.0]])) == pytest.approx(0.45512, abs=1e-5)

    def test_identical_particles_hit_floor(self):
        assert median_bandwidth(np.ones((5, 2))) == BANDWIDTH_FLOOR

    def test_needs_two_particles(self):
        with pytest.raises(InvalidInputError):
            median_bandwidth(np.zeros((1, 2)))

    def test_matches_sorted_median(self):
        x = np.random.default_rng(0).normal(size=(32, 2))
        d2 = sorted(float(np.sum((x[i] - x[j]) ** 2)) for i in range(32) for j in range(i + 1, 32))
        n = len(d2)
        med = d2[n // 2] if n % 2 else 0.5 * (d2[n // 2 - 1] + d2[n // 2])
        assert median_bandwidth(x) == pytest.approx(med / (2 * math.log(33)), rel=1e-13)

    def test_batched_agrees(self):
        x = np.random.default_rng(1).normal(size=(6, 10, 3))
        np.testing.assert_allclose(_batched_median_bandwidth(x), [median_bandwidth(p) for p in x],
                                   rtol=1e-12)


class TestKernel:
    def test_coincident(self):
        value, grad = rbf_kernel(np.array([0.4, -1.0]), np.array([0.4, -1.0]), 0.7)
        assert value == 1.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_unit_distance(self):
        value, grad = rbf_kernel(np.array([1.0]), np.array([0.0]), 1.0)
        assert value == pytest.approx(math.exp(-1), abs=1e-15)
        assert grad[0] == pytest.approx(-2 * math.exp(-1), abs=1e-15)

    @given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-3, 3)),
           st.floats(0.01, 10))
    def test_properties(self, a, b, h):
        k_ab, g_ab = rbf_kernel(a, b, h)
        k_ba, g_ba = rbf_kernel(b, a, h)
        assert k_ab == k_ba
        assert 0.0 <= k_ab <= 1.0
        np.testing.assert_allclose(g_ab, -g_ba, rtol=0, atol=1e-12)

    def test_gradient_finite_difference(self):
        a, b, h, eps = np.array([0.3, -0.2]), np.array([-0.1, 0.5]), 0.8, 1e-6
        _, grad = rbf_kernel(a, b, h)
        fd = [(rbf_kernel(a + eps * e, b, h)[0] - rbf_kernel(a - eps * e, b, h)[0]) / (2 * eps)
              for e in np.eye(2)]
        np.testing.assert_allclose(grad, fd, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            rbf_kernel(np.zeros(2), np.zeros(3), 1.0)


class TestSteinDirection:
    def test_single_particle_is_q_gradient(self):
        a = np.array([[0.2, -0.3]])
        batch = SvgdBatch(np.zeros(2), a, a, np.array([[1.5, -0.5]]), 0.3, 2.0)
        np.testing.assert_array_equal(stein_direction(batch), [[1.5, -0.5]])

    def test_repulsion_pushes_apart(self):
        a = np.array([[0.0, 0.0], [1.0, 1.0]])
        delta = stein_direction(SvgdBatch(np.zeros(2), a, a, np.zeros((2, 2)), 1.0, 1.0))
        line = a[1] - a[0]
        assert delta[0] @ line < 0 < delta[1] @ line
        # and only along the joining line
        for d in delta:
            assert abs(d[0] * line[1] - d[1] * line[0]) < 1e-15

    def test_grid_with_quadratic_q(self):
        a = np.linspace(-1, 1, 7)[:, None]
        tilde = np.linspace(-0.9, 0.9, 4)[:, None]
        h = median_bandwidth(a)
        batch = SvgdBatch(np.zeros(1), a, tilde, -a, h, 1.0)
        np.testing.assert_allclose(stein_direction(batch), double_loop_direction(a, tilde, -a, h, 1.0),
                                   rtol=0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 3), st.floats(0.0, 5.0),
           st.integers(0, 2**31 - 1))
    def test_matches_double_loop(self, m, k, d, alpha, seed):
        rng = np.random.default_rng(seed)
        a, tilde, g = rng.normal(size=(m, d)), rng.normal(size=(k, d)), rng.normal(size=(m, d))
        h = float(rng.uniform(0.1, 3.0))
        got = stein_direction(SvgdBatch(np.zeros(1), a, tilde, g, h, alpha))
        np.testing.assert_allclose(got, double_loop_direction(a, tilde, g, h, alpha), rtol=0, atol=1e-12)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            SvgdBatch(np.zeros(1), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)), 1.0, 1.0)
        with pytest.raises(InvalidInputError):
            SvgdBatch(np.zeros(1), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), 0.0, 1.0)


class TestAmortizedGradient:
    def test_linear_sampler_by_hand(self):
        phi_s, phi_n, c, alpha, h = 0.4, 0.7, 1.3, 2.0, 0.9
        net = linear_sampler(phi_s, phi_n)
        q = MlpParams([np.array([[0.0], [c]])], [np.zeros(1)])   # Q(s, a) = c a
        s, xi, xt = 0.5, 0.8, -0.6
        grads, _ = amortized_policy_gradient(net, np.array([[s]]), q, 1, 1, alpha, None, bandwidth=h,
                                             noise=(np.array([[[xi]]]), np.array([[[xt]]])))
        a, at = phi_s * s + phi_n * xi, phi_s * s + phi_n * xt
        kappa = math.exp(-(a - at) ** 2 / h)
        delta = kappa * c + alpha * (-(2 / h) * (a - at) * kappa)
        assert grads.weights[0][1, 0] == pytest.approx(delta * xt, abs=1e-14)
        assert grads.weights[0][0, 0] == pytest.approx(delta * s, abs=1e-14)

    def test_map_reduction(self):
        rng = np.random.default_rng(2)
        net = SamplerNetwork.create(2, 2, rng, hidden=(6, 5))
        q = make_q_network(2, 2, rng, hidden=(7,))
        states = rng.normal(size=(4, 2))
        xi = rng.normal(size=(4, 1, 2))
        grads, _ = amortized_policy_gradient(net, states, q, 1, 1, 0.0, None, shared_noise=True,
                                             noise=(xi, xi))
        actions = net(states, xi[:, 0])
        _, dq = mlp_backward(q, np.concatenate([states, actions], axis=1), np.ones((4, 1)))
        expect, _ = mlp_backward(net.params, net.inputs(states, xi[:, 0]), dq[:, 2:] / 4)
        for a, b in zip(grads.arrays(), expect.arrays()):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_zero_q_identical_particles(self):
        net = linear_sampler(0.3, 0.0)      # ignores noise: all particles coincide
        q = MlpParams([np.zeros((2, 1))], [np.zeros(1)])
        rng = np.random.default_rng(0)
        grads, _ = amortized_policy_gradient(net, rng.normal(size=(3, 1)), q, 4, 4, 1.0, rng)
        for g in grads.arrays():
            np.testing.assert_array_equal(g, 0.0)

    def test_matches_per_state_assembly(self):
        rng = np.random.default_rng(1)
        net = SamplerNetwork.create(2, 2, rng, hidden=(8, 8))
        q = make_q_network(2, 2, rng, hidden=(8, 8))
        states = rng.normal(size=(3, 2))
        xi, xt = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 4, 2))
        grads, _ = amortized_policy_gradient(net, states, q, 5, 4, 2.0, None, noise=(xi, xt))
        total = [np.zeros_like(a) for a in grads.arrays()]
        for b in range(3):
            rep5, rep4 = np.repeat(states[b:b + 1], 5, 0), np.repeat(states[b:b + 1], 4, 0)
            a = net(rep5, xi[b])
            _, dq = mlp_backward(q, np.concatenate([rep5, a], 1), np.ones((5, 1)))
            delta = stein_direction(SvgdBatch(states[b], a, net(rep4, xt[b]), dq[:, 2:],
                                              median_bandwidth(a), 2.0))
            g, _ = mlp_backward(net.params, net.inputs(rep4, xt[b]), delta / (4 * 3))
            total = [t + x for t, x in zip(total, g.arrays())]
        for a, b in zip(grads.arrays(), total):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_shared_noise_needs_equal_counts(self):
        net = linear_sampler(0.0, 1.0)
        with pytest.raises(InvalidInputError):
            amortized_policy_gradient(net, np.zeros((1, 1)), None, 2, 3, 1.0, np.random.default_rng(0),
                                      shared_noise=True)

    @pytest.mark.slow
    def test_flat_q_trains_toward_uniform(self):
        # with Q constant the target is uniform on the action box, so the mean should be near 0
        rng = np.random.default_rng(0)
        net = SamplerNetwork.create(1, 2, rng, hidden=(32, 32))
        net.params.biases[-1][:] = 0.8     # start off-centre
        q = MlpParams([np.zeros((3, 1))], [np.zeros(1)])
        opt = Adam(net.params, 3e-3)
        states = np.zeros((1, 1))
        for _ in range(600):
            grads, _ = amortized_policy_gradient(net, states, q, 32, 32, 1.0, rng)
            for g in grads.arrays():
                np.negative(g, out=g)
            opt.step(net.params, grads)
        samples = sample_actions(net, np.zeros(1), 10_000, np.random.default_rng(1))
        assert np.max(np.abs(samples.mean(axis=0))) < 0.05


class TestSampler:
    def test_zero_weights_give_tanh_bias(self):
        rng = np.random.default_rng(0)
        net = SamplerNetwork.create(2, 2, rng, hidden=(4,))
        for w in net.params.weights:
            w[...] = 0.0
        out = sample_actions(net, np.ones(2), 6, rng)
        np.testing.assert_array_equal(out, np.tile(np.tanh(net.params.biases[-1]), (6, 1)))

    def test_reproducible(self):
        net = SamplerNetwork.create(2, 2, np.random.default_rng(0), hidden=(8,))
        a = sample_actions(net, np.zeros(2), 5, np.random.default_rng(3))
        b = sample_actions(net, np.zeros(2), 5, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_actions_inside_box(self):
        net = SamplerNetwork.create(2, 2, np.random.default_rng(0), hidden=(8,))
        net.params.weights[-1] *= 50
        a = sample_actions(net, np.zeros(2), 1000, np.random.default_rng(1))
        assert np.all(np.abs(a) <= 1.0)

    def test_rejects_zero_samples(self):
        net = SamplerNetwork.create(2, 2, np.random.default_rng(0), hidden=(8,))
        with pytest.raises(InvalidInputError):
            sample_actions(net, np.zeros(2), 0, np.random.default_rng(1))


class TestDensity:
    def test_identity_map(self):
        net = linear_sampler(0.0, 1.0)
        assert action_log_density(net, np.zeros(1), np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert action_log_density(net, np.zeros(1), np.zeros(1)) == pytest.approx(-0.91894, abs=1e-5)

    def test_scaled_map(self):
        net = linear_sampler(0.0, 2.0)
        xi = 0.7
        expect = -0.5 * xi**2 - 0.5 * math.log(2 * math.pi) - math.log(2)
        assert action_log_density(net, np.zeros(1), np.array([xi])) == pytest.approx(expect, abs=1e-14)

    def test_singular_jacobian_is_unavailable(self):
        net = linear_sampler(1.0, 0.0)
        assert action_log_density(net, np.ones(1), np.zeros(1)) is None
        log_q, ok = action_log_densities(net, np.ones((3, 1)), np.zeros((3, 1)))
        assert not ok.any() and np.all(np.isnan(log_q))

    def test_matches_finite_difference_jacobian(self):
        rng = np.random.default_rng(4)
        net = SamplerNetwork.create(2, 2, rng, hidden=(10, 10))
        states, noise = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        log_q, ok = action_log_densities(net, states, noise)
        assert ok.all()
        eps = 1e-6
        for s, xi, lq in zip(states, noise, log_q):
            jac = np.column_stack([(net(s[None], (xi + eps * e)[None])[0] - net(s[None], (xi - eps * e)[None])[0])
                                   / (2 * eps) for e in np.eye(2)])
            expect = -0.5 * xi @ xi - math.log(2 * math.pi) - math.log(abs(np.linalg.det(jac)))
            assert lq == pytest.approx(expect, abs=1e-4)
