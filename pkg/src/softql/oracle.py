"""Executable property battery for the tabular solvers.

Each check runs on seeded random MDPs and reports one
:class:`PropertyResult`; ``run_battery`` is what ``softql oracle-check``
executes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import MdpGenSpec, generate_random_mdp
from .tabular import (
    TabularMdp,
    boltzmann_improvement,
    evaluate_policy_soft,
    hard_value_iteration,
    maxent_policy_from_q,
    pg_softq_gradient_pair,
    policy_entropy,
    soft_bellman_backup,
    soft_value_iteration,
    soft_values,
)

DEFAULT_SIZES = ((1, 1), (2, 2), (3, 2), (4, 3), (6, 4))
ALPHAS = (0.1, 1.0, 10.0)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seed: int = None

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        where = f" (seed {self.seed})" if self.seed is not None and not self.passed else ""
        return f"[{tag}] {self.name}: {self.detail}{where}"


def finite_horizon_soft_q(mdp: TabularMdp, policy, alpha, horizon=300) -> np.ndarray:
    """Soft Q of ``policy`` from its definition, truncated at ``horizon``.

    Propagates the state distribution forward from every (s, a) and sums
    discounted expected reward plus ``alpha``-weighted policy entropy; no
    Bellman recursion is involved.
    """
    policy = np.asarray(policy, dtype=np.float64)
    s, a = mdp.n_states, mdp.n_actions
    per_state = np.sum(policy * mdp.reward, axis=1) + alpha * policy_entropy(policy)
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    dist = mdp.transition.reshape(s * a, s).copy()
    total = mdp.reward.reshape(s * a).copy()
    discount = 1.0
    for _ in range(horizon):
        discount *= mdp.gamma
        total += discount * (dist @ per_state)
        dist = dist @ p_pi
    return total.reshape(s, a)


def random_mdps(seed, sizes, count, gamma=0.9):
    rng = np.random.default_rng(seed)
    for i in range(count):
        n_s, n_a = sizes[i % len(sizes)]
        mdp_seed = int(rng.integers(2**31))
        yield mdp_seed, generate_random_mdp(MdpGenSpec(n_s, n_a, gamma=gamma, seed=mdp_seed))


def random_q_pairs(rng, shape, count):
    """Independent pairs mixed with near-constant shifts (the tight case for contraction)."""
    for i in range(count):
        q1 = rng.normal(scale=5.0, size=shape)
        if i % 2:
            q2 = q1 + rng.normal(scale=3.0) + rng.normal(scale=1e-3, size=shape)
        else:
            q2 = rng.normal(scale=5.0, size=shape)
        yield q1, q2


def check_contraction(mdps, n_pairs=100, alpha=1.0, backup=soft_bellman_backup, seed=0):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for mdp_seed, mdp in mdps:
        for q1, q2 in random_q_pairs(rng, (mdp.n_states, mdp.n_actions), n_pairs):
            lhs = np.max(np.abs(backup(mdp, q1, alpha) - backup(mdp, q2, alpha)))
            rhs = mdp.gamma * np.max(np.abs(q1 - q2))
            worst = max(worst, lhs - rhs)
            if lhs > rhs + 1e-12:
                return PropertyResult("contraction", False,
                                      f"|Tq1 - Tq2| = {lhs:.6g} > gamma |q1 - q2| = {rhs:.6g}", mdp_seed)
    return PropertyResult("contraction", True, f"worst margin {worst:.3g}")


def check_fixed_point(mdps, tol=1e-10):
    worst_res, worst_brute = 0.0, 0.0
    for mdp_seed, mdp in mdps:
        for alpha in ALPHAS:
            sol = soft_value_iteration(mdp, alpha, tol=tol)
            res = np.max(np.abs(soft_bellman_backup(mdp, sol.q, alpha) - sol.q))
            brute = np.max(np.abs(finite_horizon_soft_q(mdp, sol.policy, alpha, 300) - sol.q))
            worst_res, worst_brute = max(worst_res, res), max(worst_brute, brute)
            if res > 1e-8 or brute > 1e-4:
                return PropertyResult("fixed point", False,
                                      f"alpha={alpha}: residual {res:.3g}, brute-force gap {brute:.3g}",
                                      mdp_seed)
    return PropertyResult("fixed point", True,
                          f"max residual {worst_res:.3g}, max brute-force gap {worst_brute:.3g}")


def check_policy_improvement(mdps, seed=0, alpha=1.0):
    rng = np.random.default_rng(seed)
    worst = np.inf
    for mdp_seed, mdp in mdps:
        policy = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
        q_pi = evaluate_policy_soft(mdp, policy, alpha)
        q_new = evaluate_policy_soft(mdp, boltzmann_improvement(q_pi, alpha), alpha)
        gap = float(np.min(q_new - q_pi))
        worst = min(worst, gap)
        if gap < -1e-8:
            return PropertyResult("policy improvement", False, f"min(Q_new - Q_old) = {gap:.3g}", mdp_seed)
    return PropertyResult("policy improvement", True, f"min(Q_new - Q_old) = {worst:.3g}")


def check_hard_limit(mdps):
    worst = 0.0
    for mdp_seed, mdp in mdps:
        gap = np.max(np.abs(soft_value_iteration(mdp, 1e-6, tol=1e-12).q - hard_value_iteration(mdp)))
        worst = max(worst, gap)
        if gap > 1e-3:
            return PropertyResult("hard limit", False, f"|Q_soft - Q_hard| = {gap:.3g}", mdp_seed)
    return PropertyResult("hard limit", True, f"max gap {worst:.3g}")


def check_uniform_limit(mdps, alpha=1e3):
    worst = 0.0
    for mdp_seed, mdp in mdps:
        pol = soft_value_iteration(mdp, alpha, tol=1e-9).policy
        tv = float(np.max(0.5 * np.sum(np.abs(pol - 1.0 / mdp.n_actions), axis=1)))
        worst = max(worst, tv)
        if tv > 1e-3:
            return PropertyResult("uniform limit", False, f"total variation {tv:.3g}", mdp_seed)
    return PropertyResult("uniform limit", True, f"max total variation {worst:.3g}")


def check_uniqueness(mdps, seed=0, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for mdp_seed, mdp in mdps:
        a = soft_value_iteration(mdp, 1.0, tol=tol)
        b = soft_value_iteration(mdp, 1.0, tol=tol, q0=rng.normal(scale=10.0, size=a.q.shape))
        gap = float(np.max(np.abs(a.q - b.q)))
        worst = max(worst, gap)
        # each run stops within gamma/(1-gamma)*tol of the fixed point
        if gap > 2 * mdp.gamma / (1 - mdp.gamma) * tol:
            return PropertyResult("uniqueness", False, f"fixed points differ by {gap:.3g}", mdp_seed)
    return PropertyResult("uniqueness", True, f"max gap {worst:.3g}")


def check_policy_consistency(seed=0, n_rows=1000):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_rows):
        n = int(rng.integers(1, 8))
        alpha = float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
        q = rng.normal(scale=3.0, size=(1, n))
        pol = maxent_policy_from_q(q, soft_values(q, alpha), alpha)[0]
        w = np.exp(q[0] / alpha - np.max(q[0] / alpha))
        worst = max(worst, float(np.max(np.abs(pol - w / w.sum()))))
    ok = worst <= 1e-12
    return PropertyResult("policy consistency", ok, f"max deviation from softmax {worst:.3g}",
                          None if ok else seed)


def check_bandit_equivalence(seed=0, n_instances=100):
    rng = np.random.default_rng(seed)
    worst = 1.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 7))
        bandit = TabularMdp(np.ones((1, n, 1)), rng.uniform(-1, 1, size=(1, n)), 0.9)
        pg, sq = pg_softq_gradient_pair(bandit, rng.normal(size=n))
        cos = float(pg @ sq / (np.linalg.norm(pg) * np.linalg.norm(sq)))
        worst = min(worst, cos)
        if cos < 1 - 1e-8:
            return PropertyResult("policy-gradient equivalence", False, f"cosine {cos:.12f}", seed)
    return PropertyResult("policy-gradient equivalence", True, f"min cosine {worst:.15f}")


def run_battery(seed=0, sizes=DEFAULT_SIZES, n_mdps=20, backup=soft_bellman_backup) -> list:
    mdps = list(random_mdps(seed, sizes, n_mdps))
    return [
        check_contraction(mdps, backup=backup, seed=seed),
        check_fixed_point(mdps),
        check_policy_improvement(mdps, seed=seed),
        check_hard_limit(mdps),
        check_uniform_limit(mdps),
        check_uniqueness(mdps, seed=seed),
        check_policy_consistency(seed=seed),
        check_bandit_equivalence(seed=seed),
    ]
