"""Stein variational gradient machinery and the amortized sampling network.

The sampler ``a = f(xi; s)`` is an MLP on ``[s, xi]`` with a tanh output
so actions stay inside ``(-1, 1)^d``.  It is trained by pushing the Stein
direction through the network (amortized SVGD).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .nn import HIDDEN_SIZES, MlpParams, init_mlp, mlp_backward, mlp_forward

BANDWIDTH_FLOOR = 1e-6
SINGULAR_DET = 1e-12
LOG_2PI = np.log(2.0 * np.pi)


def median_bandwidth(actions) -> float:
    """RBF bandwidth ``median(squared pairwise distance) / (2 log(M + 1))``."""
    x = np.asarray(actions, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("median_bandwidth needs at least two particles")
    m = x.shape[0]
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    med = np.median(d2[np.triu_indices(m, k=1)])
    if med <= 0.0:
        return BANDWIDTH_FLOOR
    return max(float(med / (2.0 * np.log(m + 1.0))), BANDWIDTH_FLOOR)


def _batched_median_bandwidth(particles):
    # particles: (B, M, d) -> (B,) bandwidths, same rule as median_bandwidth
    b, m, _ = particles.shape
    sq = np.sum(particles * particles, axis=2)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(particles, particles.transpose(0, 2, 1))
    iu = np.triu_indices(m, k=1)
    flat = np.maximum(d2.reshape(b, m * m)[:, iu[0] * m + iu[1]], 0.0)
    med = np.median(flat, axis=1)
    h = med / (2.0 * np.log(m + 1.0))
    return np.where(med > 0.0, np.maximum(h, BANDWIDTH_FLOOR), BANDWIDTH_FLOOR)


def rbf_kernel(a, b, h):
    """``exp(-|a - b|^2 / h)`` and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"kernel arguments differ in shape: {a.shape} vs {b.shape}")
    if not h > 0:
        raise InvalidInputError("bandwidth must be positive")
    diff = a - b
    value = float(np.exp(-np.dot(diff, diff) / h))
    return value, -(2.0 / h) * diff * value


def rbf_kernel_matrix(x, y, h):
    """Kernel values ``k[..., i, j] = kappa(x_i, y_j)`` and ``grad[..., i, j, :]``,
    the gradient of each entry with respect to ``x_i``.

    Leading batch dimensions broadcast; ``h`` is a scalar or has the batch
    shape.
    """
    diff = x[..., :, None, :] - y[..., None, :, :]
    h = np.asarray(h, dtype=np.float64)[..., None, None]
    k = np.exp(-np.sum(diff * diff, axis=-1) / h)
    grad = -(2.0 / h)[..., None] * diff * k[..., None]
    return k, grad


@dataclass
class SvgdBatch:
    """Particles for one Stein update at a single state.

    ``actions`` (M, d) drive the update, ``tilde_actions`` (K, d) are the
    points where the direction is evaluated, ``q_grads`` (M, d) hold the
    action-gradient of Q at each driving particle.
    """

    state: np.ndarray
    actions: np.ndarray
    tilde_actions: np.ndarray
    q_grads: np.ndarray
    h: float
    alpha: float

    def __post_init__(self):
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.tilde_actions = np.atleast_2d(np.asarray(self.tilde_actions, dtype=np.float64))
        self.q_grads = np.atleast_2d(np.asarray(self.q_grads, dtype=np.float64))
        if self.actions.shape != self.q_grads.shape:
            raise InvalidInputError("actions and q_grads must have the same shape")
        if self.tilde_actions.shape[1] != self.actions.shape[1]:
            raise InvalidInputError("tilde_actions dimension differs from actions")
        if min(self.actions.shape[0], self.tilde_actions.shape[0]) < 1:
            raise InvalidInputError("need at least one particle on each side")
        if not self.h > 0:
            raise InvalidInputError("bandwidth must be positive")
        if self.alpha < 0:
            raise InvalidInputError("alpha must be non-negative")


def stein_direction(batch: SvgdBatch) -> np.ndarray:
    """``(1/M) sum_i [kappa(a_i, a~_j) dQ(a_i) + alpha grad_{a_i} kappa(a_i, a~_j)]`` per ``j``."""
    k, grad = rbf_kernel_matrix(batch.actions, batch.tilde_actions, batch.h)
    m = batch.actions.shape[0]
    drive = k.T @ batch.q_grads
    repulse = grad.sum(axis=0)
    return (drive + batch.alpha * repulse) / m


class SamplerNetwork:
    """State-conditioned sampler ``a = f(xi; s)`` with ``xi ~ N(0, I)``."""

    def __init__(self, params: MlpParams, state_dim: int, noise_dim: int):
        if params.in_dim != state_dim + noise_dim:
            raise InvalidInputError("sampler input width must be state_dim + noise_dim")
        self.params = params
        self.state_dim = state_dim
        self.noise_dim = noise_dim

    @classmethod
    def create(cls, state_dim, action_dim, rng, hidden=HIDDEN_SIZES):
        params = init_mlp(state_dim + action_dim, action_dim, rng, hidden=hidden, output="tanh")
        return cls(params, state_dim, action_dim)

    @property
    def action_dim(self) -> int:
        return self.params.out_dim

    def inputs(self, states, noise):
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim)
        noise = np.asarray(noise, dtype=np.float64).reshape(-1, self.noise_dim)
        return np.concatenate([states, noise], axis=1)

    def __call__(self, states, noise):
        return mlp_forward(self.params, self.inputs(states, noise))


def sample_actions(net: SamplerNetwork, state, n, rng) -> np.ndarray:
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    noise = rng.standard_normal((n, net.noise_dim))
    states = np.broadcast_to(np.asarray(state, dtype=np.float64), (n, net.state_dim))
    return net(states, noise)


def noise_jacobians(net: SamplerNetwork, states, noise) -> np.ndarray:
    """``d a / d xi`` for each row, shape (N, d, d), via d backward passes."""
    x = net.inputs(states, noise)
    out, cache = mlp_forward(net.params, x, return_cache=True)
    n, d = out.shape
    if net.noise_dim != d:
        raise InvalidInputError("density needs noise_dim == action_dim")
    jac = np.empty((n, d, d))
    for k in range(d):
        cot = np.zeros_like(out)
        cot[:, k] = 1.0
        _, dx = mlp_backward(net.params, x, cot, cache=cache, param_grads=False)
        jac[:, k, :] = dx[:, net.state_dim:]
    return jac


def action_log_densities(net: SamplerNetwork, states, noise):
    """Log density of ``a = f(xi; s)`` for a batch of noise draws.

    Returns ``(log_q, ok)``; rows with ``|det J| < 1e-12`` have ``ok``
    False and ``log_q`` NaN.
    """
    noise = np.asarray(noise, dtype=np.float64).reshape(-1, net.noise_dim)
    jac = noise_jacobians(net, states, noise)
    det = np.abs(np.linalg.det(jac))
    ok = det >= SINGULAR_DET
    log_p = -0.5 * np.sum(noise * noise, axis=1) - 0.5 * net.noise_dim * LOG_2PI
    with np.errstate(divide="ignore"):
        log_q = np.where(ok, log_p - np.log(np.where(ok, det, 1.0)), np.nan)
    return log_q, ok


def action_log_density(net: SamplerNetwork, state, noise):
    """Scalar version; returns None when the Jacobian is (numerically) singular."""
    log_q, ok = action_log_densities(net, np.asarray(state)[None, :], np.asarray(noise)[None, :])
    return float(log_q[0]) if ok[0] else None


def amortized_policy_gradient(net: SamplerNetwork, states, q_params: MlpParams, m, k, alpha, rng,
                              shared_noise=False, bandwidth=None, noise=None):
    """Ascent direction for the sampler parameters from the Stein update.

    For each state, ``m`` driving particles and ``k`` evaluation particles
    are drawn from fresh noise (or the same ``m`` particles when
    ``shared_noise``), the Stein direction is computed with
    ``dQ/da`` from ``q_params`` and pulled back through the sampler:
    ``mean_s (1/K) sum_j delta(a~_j)^T df(xi~_j; s)/dphi``.

    ``bandwidth`` overrides the median heuristic (which needs ``m >= 2``;
    with a single driving particle the bandwidth defaults to 1).
    ``noise`` may supply ``(xi, xi_tilde)`` arrays of shape (B, m, d) and
    (B, k, d) instead of drawing them.

    Returns ``(grads, info)`` where ``info`` has the mean bandwidth.
    """
    if m < 1 or k < 1:
        raise InvalidInputError("m and k must be at least 1")
    if shared_noise and m != k:
        raise InvalidInputError("shared noise needs m == k")
    states = np.asarray(states, dtype=np.float64).reshape(-1, net.state_dim)
    b, ds, d = states.shape[0], net.state_dim, net.action_dim
    if noise is None:
        xi = rng.standard_normal((b, m, net.noise_dim))
        xi_t = xi if shared_noise else rng.standard_normal((b, k, net.noise_dim))
    else:
        xi, xi_t = (np.asarray(n_, dtype=np.float64) for n_ in noise)
    rep = np.repeat(states, m, axis=0)
    x_drive = np.concatenate([rep, xi.reshape(b * m, -1)], axis=1)
    if shared_noise:
        x_tilde = x_drive
        a_tilde, cache = mlp_forward(net.params, x_tilde, return_cache=True)
        a = a_tilde.reshape(b, m, d)
    else:
        a = mlp_forward(net.params, x_drive).reshape(b, m, d)
        x_tilde = np.concatenate([np.repeat(states, k, axis=0), xi_t.reshape(b * k, -1)], axis=1)
        a_tilde, cache = mlp_forward(net.params, x_tilde, return_cache=True)
    a_t = a_tilde.reshape(b, k, d)

    # dQ/da at the driving particles
    q_in = np.concatenate([rep, a.reshape(b * m, d)], axis=1)
    q_out, q_cache = mlp_forward(q_params, q_in, return_cache=True)
    _, dq_in = mlp_backward(q_params, q_in, np.ones_like(q_out), cache=q_cache, param_grads=False)
    q_grads = dq_in[:, ds:].reshape(b, m, d)

    if bandwidth is not None:
        h = np.full(b, float(bandwidth))
    elif m >= 2:
        h = _batched_median_bandwidth(a)
    else:
        h = np.ones(b)
    # kernel terms without materializing the (B, M, K, d) difference tensor
    sq = (np.sum(a * a, axis=2)[:, :, None] + np.sum(a_t * a_t, axis=2)[:, None, :]
          - 2.0 * np.matmul(a, a_t.transpose(0, 2, 1)))
    np.maximum(sq, 0.0, out=sq)
    kern = np.exp(-sq / h[:, None, None])
    kern_t = kern.transpose(0, 2, 1)
    drive = np.matmul(kern_t, q_grads)
    # sum_i grad_{a_i} kappa(a_i, a~_j) = -(2/h) (sum_i k_ij a_i - a~_j sum_i k_ij)
    repulse = -(2.0 / h)[:, None, None] * (np.matmul(kern_t, a) - a_t * kern.sum(axis=1)[:, :, None])
    delta = (drive + alpha * repulse) / m

    # pull back through the sampler at the evaluation particles
    cot = delta.reshape(b * k, d) / (k * b)
    grads, _ = mlp_backward(net.params, x_tilde, cot, cache=cache)
    return grads, {"bandwidth": float(np.mean(h)), "q_grad_norm": float(np.mean(np.abs(q_grads)))}
