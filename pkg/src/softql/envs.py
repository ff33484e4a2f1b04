"""Environments: the 2-D multi-goal point mass and random tabular MDPs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .tabular import TabularMdp


def _default_goals():
    return ((5.0, 0.0), (-5.0, 0.0), (0.0, 5.0), (0.0, -5.0))


@dataclass
class MultiGoalEnv:
    """Point mass in the plane with four symmetric Gaussian reward bumps.

    Actions are velocities clipped to ``[-1, 1]^2``; one unit timestep per
    step.  An episode ends after ``horizon`` steps or when the position
    comes within ``capture_radius`` of a goal.  Only the latter is a true
    terminal state; hitting the horizon is a time-limit truncation (see
    ``captured``).
    """

    goals: tuple = field(default_factory=_default_goals)
    goal_weight: float = 10.0
    goal_sigma: float = 1.0
    action_cost: float = 0.01
    capture_radius: float = 0.5
    horizon: int = 20
    reset_jitter: float = 0.1

    state_dim = 2
    action_dim = 2
    action_low = -1.0
    action_high = 1.0

    def __post_init__(self):
        self.goals = np.asarray(self.goals, dtype=np.float64).reshape(-1, 2)
        if self.horizon < 1:
            raise InvalidInputError("horizon must be at least 1")
        self.position = np.zeros(2)
        self.steps = 0
        self.done = True
        self.captured = False

    @property
    def action_volume(self) -> float:
        return (self.action_high - self.action_low) ** self.action_dim

    def reward(self, position, action) -> float:
        d2 = np.sum((self.goals - position) ** 2, axis=1)
        bumps = self.goal_weight * np.exp(-d2 / (2.0 * self.goal_sigma ** 2))
        return float(bumps.sum() - self.action_cost * np.dot(action, action))

    def nearest_goal(self, position) -> int:
        return int(np.argmin(np.sum((self.goals - np.asarray(position)) ** 2, axis=1)))

    def reset(self, rng=None) -> np.ndarray:
        self.position = np.zeros(2)
        if self.reset_jitter > 0:
            if rng is None:
                raise InvalidInputError("a jittered reset needs an rng")
            self.position = rng.normal(0.0, self.reset_jitter, size=2)
        self.steps = 0
        self.done = False
        self.captured = False
        return self.position.copy()

    def step(self, action):
        if self.done:
            raise ContractViolation("step() called on a finished episode; call reset() first")
        a = np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)
        if a.shape != (2,):
            raise InvalidInputError(f"action must be a 2-vector, got shape {a.shape}")
        self.position = self.position + a
        self.steps += 1
        reward = self.reward(self.position, a)
        dists = np.sqrt(np.sum((self.goals - self.position) ** 2, axis=1))
        self.captured = bool(np.any(dists < self.capture_radius))
        self.done = self.captured or self.steps >= self.horizon
        return self.position.copy(), reward, self.done


def multigoal_reset(env: MultiGoalEnv, rng=None):
    return env.reset(rng)


def multigoal_step(env: MultiGoalEnv, action):
    return env.step(action)


@dataclass(frozen=True)
class MdpGenSpec:
    n_states: int
    n_actions: int
    gamma: float = 0.9
    sparsity: float = 0.0
    reward_range: tuple = (-1.0, 1.0)
    seed: int = 0


def generate_random_mdp(spec: MdpGenSpec) -> TabularMdp:
    """Random MDP with normalized positive transition rows.

    ``sparsity`` is the probability that an entry is zeroed; each row keeps
    at least one successor.
    """
    if spec.n_states < 1 or spec.n_actions < 1:
        raise InvalidInputError("n_states and n_actions must be at least 1")
    rng = np.random.default_rng(spec.seed)
    s, a = spec.n_states, spec.n_actions
    weights = rng.exponential(size=(s, a, s))
    if spec.sparsity > 0:
        mask = rng.random((s, a, s)) >= spec.sparsity
        keep = rng.integers(s, size=(s, a))
        mask[np.arange(s)[:, None], np.arange(a)[None, :], keep] = True
        weights = weights * mask
    transition = weights / weights.sum(axis=2, keepdims=True)
    lo, hi = spec.reward_range
    reward = rng.uniform(lo, hi, size=(s, a))
    return TabularMdp(transition=transition, reward=reward, gamma=spec.gamma)


TRAJECTORY_HEADER = ("episode", "step", "x", "y", "ax", "ay", "reward")


def write_trajectories(path, rows) -> Path:
    """CSV dump of ``(episode, step, x, y, ax, ay, reward)`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for ep, step, x, y, ax, ay, r in rows:
            writer.writerow([int(ep), int(step), repr(float(x)), repr(float(y)),
                             repr(float(ax)), repr(float(ay)), repr(float(r))])
    return path
