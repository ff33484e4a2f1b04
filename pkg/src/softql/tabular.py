"""Exact maximum-entropy solvers for finite MDPs.

These are the ground truth the function-approximation code is checked
against: soft Bellman backups, soft value iteration, Boltzmann policies,
soft policy evaluation and the bandit policy-gradient equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

MDP_FORMAT_HEADER = "softql-mdp"
MDP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with ``transition[s, a, s']`` and ``reward[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidInputError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape[:2]:
            raise InvalidInputError(f"reward shape {r.shape} does not match (S, A) = {p.shape[:2]}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise InvalidInputError("transition probabilities must be finite and non-negative")
        if np.max(np.abs(p.sum(axis=2) - 1.0)) > 1e-12:
            raise InvalidInputError("transition rows must sum to 1 within 1e-12")
        if not np.all(np.isfinite(r)):
            raise InvalidInputError("rewards must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInputError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class SoftSolution:
    q: np.ndarray
    v: np.ndarray
    policy: np.ndarray
    alpha: float
    iterations: int
    residual: float

    def converged(self, tol) -> bool:
        return self.residual <= tol


def _check_alpha(alpha):
    if not alpha > 0 or not math.isfinite(alpha):
        raise InvalidInputError(f"alpha must be a positive finite number, got {alpha}")


def soft_value_discrete(q_row, alpha) -> float:
    """``alpha * log(sum(exp(q_row / alpha)))`` using a max shift."""
    _check_alpha(alpha)
    q_row = np.asarray(q_row, dtype=np.float64)
    if q_row.ndim != 1 or q_row.size == 0:
        raise InvalidInputError("q_row must be a non-empty vector")
    if not np.all(np.isfinite(q_row)):
        raise InvalidInputError("q_row entries must be finite")
    m = q_row.max()
    return float(m + alpha * np.log(np.sum(np.exp((q_row - m) / alpha))))


def soft_values(q, alpha) -> np.ndarray:
    """Row-wise :func:`soft_value_discrete` for a (S, A) matrix."""
    _check_alpha(alpha)
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] == 0:
        raise InvalidInputError("q must be a non-empty (S, A) matrix")
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("q entries must be finite")
    m = q.max(axis=1)
    return m + alpha * np.log(np.sum(np.exp((q - m[:, None]) / alpha), axis=1))


def _check_q(mdp, q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidInputError(f"q shape {q.shape} != ({mdp.n_states}, {mdp.n_actions})")
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("q entries must be finite")
    return q


def soft_bellman_backup(mdp: TabularMdp, q, alpha) -> np.ndarray:
    """One application of the soft Bellman operator T to ``q``."""
    q = _check_q(mdp, q)
    v = soft_values(q, alpha)
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def maxent_policy_from_q(q, v, alpha, atol=1e-6) -> np.ndarray:
    """Boltzmann policy ``exp((q - v) / alpha)``; ``v`` must be the soft value of ``q``."""
    _check_alpha(alpha)
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if v.shape != (q.shape[0],):
        raise InvalidInputError(f"v shape {v.shape} does not match q rows {q.shape[0]}")
    if np.max(np.abs(soft_values(q, alpha) - v)) > atol:
        raise InvalidInputError("v is not the soft value of q")
    policy = np.exp((q - v[:, None]) / alpha)
    # v may carry up to atol error; renormalize so rows sum to 1 exactly
    return policy / policy.sum(axis=1, keepdims=True)


def soft_value_iteration(mdp: TabularMdp, alpha, tol=1e-10, max_iter=100_000, q0=None) -> SoftSolution:
    """Iterate the soft backup from ``q0`` (zeros by default) to a sup-norm tolerance.

    If ``max_iter`` is exhausted the returned solution carries the last
    iterate with ``residual > tol``; callers should check ``converged``.
    """
    _check_alpha(alpha)
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    if max_iter < 1:
        raise InvalidInputError("max_iter must be at least 1")
    q = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else _check_q(mdp, q0).copy()
    residual = math.inf
    iterations = 0
    while iterations < max_iter:
        q_next = soft_bellman_backup(mdp, q, alpha)
        residual = float(np.max(np.abs(q_next - q)))
        q = q_next
        iterations += 1
        if residual <= tol:
            break
    v = soft_values(q, alpha)
    policy = maxent_policy_from_q(q, v, alpha)
    return SoftSolution(q=q, v=v, policy=policy, alpha=float(alpha),
                        iterations=iterations, residual=residual)


def hard_value_iteration(mdp: TabularMdp, tol=1e-12, max_iter=100_000) -> np.ndarray:
    """Standard (max) Q-value iteration, the alpha -> 0 reference."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        q_next = mdp.reward + mdp.gamma * (mdp.transition @ q.max(axis=1))
        done = np.max(np.abs(q_next - q)) <= tol
        q = q_next
        if done:
            break
    return q


def policy_entropy(policy) -> np.ndarray:
    """Per-state Shannon entropy (nats) of a (S, A) policy; 0 log 0 = 0."""
    p = np.asarray(policy, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def _check_policy(mdp, policy):
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidInputError(f"policy shape {policy.shape} != ({mdp.n_states}, {mdp.n_actions})")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-9:
        raise InvalidInputError("policy rows must be probability distributions")
    return policy


def evaluate_policy_soft(mdp: TabularMdp, policy, alpha, tol=1e-12, max_iter=100_000) -> np.ndarray:
    """Soft Q-function of a fixed policy, with the entropy bonus scaled by ``alpha``.

    Solves Q = r + gamma * P (alpha * H(pi) + sum_a pi Q) by fixed-point
    iteration to sup-norm tolerance ``tol``.
    """
    policy = _check_policy(mdp, policy)
    bonus = alpha * policy_entropy(policy)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        v = bonus + np.sum(policy * q, axis=1)
        q_next = mdp.reward + mdp.gamma * (mdp.transition @ v)
        done = np.max(np.abs(q_next - q)) <= tol
        q = q_next
        if done:
            break
    return q


def boltzmann_improvement(q_pi, alpha) -> np.ndarray:
    """Policy proportional to ``exp(q_pi / alpha)``."""
    q_pi = np.asarray(q_pi, dtype=np.float64)
    return maxent_policy_from_q(q_pi, soft_values(q_pi, alpha), alpha)


def pg_softq_gradient_pair(bandit: TabularMdp, energy_params, alpha=1.0):
    """Exact entropy-regularized policy gradient vs. soft Bellman-error direction.

    The bandit's single state carries a softmax policy over per-action
    energies ``E``.  Route (a) is the score-function policy gradient with
    the empirical soft Q-value of the policy, baseline ``logsumexp(E) + 1``
    and the entropy gradient computed in closed form.  Route (b) is the
    descent direction of the soft Bellman error with ``Q = E``, the value
    taken as ``logsumexp(E)`` and the empirical-advantage target.  Both are
    exact expectations under the policy; they should be positively
    proportional.
    """
    if bandit.n_states != 1:
        raise InvalidInputError("pg_softq_gradient_pair needs a single-state MDP")
    if alpha != 1.0:
        raise InvalidInputError("the equivalence is stated for alpha = 1")
    energy = np.asarray(energy_params, dtype=np.float64)
    if energy.shape != (bandit.n_actions,):
        raise InvalidInputError("need one energy per action")
    log_z = soft_value_discrete(energy, 1.0)
    pi = np.exp(energy - log_z)
    n = energy.size
    eye = np.eye(n)
    q_hat = evaluate_policy_soft(bandit, pi[None, :], 1.0)[0]

    # route (a): E_pi[grad log pi * (Q + b)] + grad H, grad log pi(a) = e_a - pi
    score = eye - pi[None, :]
    baseline = log_z + 1.0
    pg = (pi[:, None] * score * (q_hat + baseline)[:, None]).sum(axis=0)
    # dH/dE_k = -sum_a dpi_a/dE_k (1 + log pi_a), dpi_a/dE_k = pi_a (delta_ak - pi_k)
    jac = pi[:, None] * (eye - pi[None, :])
    grad_h = -(jac * (1.0 + np.log(pi))[:, None]).sum(axis=0)
    pg = pg + grad_h

    # route (b): (dQ/dE - dV/dE) (A_hat + V - Q), with A_hat = Q_hat - V(Q_hat)
    advantage = q_hat - soft_value_discrete(q_hat, 1.0)
    residual = advantage + log_z - energy
    dq = eye
    dv = pi
    bellman = (pi[:, None] * (dq - dv[None, :]) * residual[:, None]).sum(axis=0)
    return pg, bellman


def write_mdp(path, mdp: TabularMdp) -> Path:
    """Plain-text MDP dump; floats are written with ``repr`` so they round-trip."""
    path = Path(path)
    lines = [f"{MDP_FORMAT_HEADER} {MDP_FORMAT_VERSION}",
             f"n_states {mdp.n_states}",
             f"n_actions {mdp.n_actions}",
             f"gamma {mdp.gamma!r}",
             "reward"]
    lines += [" ".join(repr(float(x)) for x in row) for row in mdp.reward]
    lines.append("transition")
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(" ".join(repr(float(x)) for x in mdp.transition[s, a]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_mdp(path) -> TabularMdp:
    text = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in text if ln and not ln.startswith("#")]

    def expect(i, key):
        parts = lines[i].split()
        if parts[0] != key or len(parts) != 2:
            raise InvalidInputError(f"expected '{key} <value>' got {lines[i]!r}")
        return parts[1]

    try:
        if expect(0, MDP_FORMAT_HEADER) != str(MDP_FORMAT_VERSION):
            raise InvalidInputError(f"unsupported MDP format version in {lines[0]!r}")
        n_s = int(expect(1, "n_states"))
        n_a = int(expect(2, "n_actions"))
        gamma = float(expect(3, "gamma"))
        if lines[4] != "reward":
            raise InvalidInputError("missing 'reward' section")
        reward = np.array([[float(x) for x in lines[5 + s].split()] for s in range(n_s)])
        start = 5 + n_s
        if lines[start] != "transition":
            raise InvalidInputError("missing 'transition' section")
        rows = [[float(x) for x in lines[start + 1 + k].split()] for k in range(n_s * n_a)]
        if len(lines) != start + 1 + n_s * n_a:
            raise InvalidInputError("trailing content after transition rows")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed MDP file: {exc}") from exc
    transition = np.array(rows).reshape(n_s, n_a, n_s)
    return TabularMdp(transition=transition, reward=reward.reshape(n_s, n_a), gamma=gamma)
