"""Soft Q-learning with an amortized SVGD sampler.

The loop alternates environment steps with one Q-function update and one
sampler update per step, using a replay pool, importance-sampled soft
values and hard-copied target networks.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericAbort
from .nn import Adam, MlpParams, init_mlp, mlp_backward, mlp_forward, save_checkpoint
from .svgd import SamplerNetwork, action_log_densities, amortized_policy_gradient

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "mean_return", "mean_disc_return", "q_loss", "mean_soft_value", "seconds")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of randomness."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool
    # episode ended (terminal or time limit); only ``terminal`` stops bootstrapping
    episode_end: bool = False


@dataclass
class Minibatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return self.rewards.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transitions are overwritten first."""

    def __init__(self, state_dim, action_dim, capacity=1_000_000):
        if capacity < 1:
            raise InvalidInputError("capacity must be at least 1")
        self.capacity = int(capacity)
        self.state_dim, self.action_dim = state_dim, action_dim
        self._states = None
        self._next = 0
        self.size = 0

    def _allocate(self):
        c = self.capacity
        self._states = np.empty((c, self.state_dim))
        self._actions = np.empty((c, self.action_dim))
        self._rewards = np.empty(c)
        self._next_states = np.empty((c, self.state_dim))
        self._terminals = np.empty(c, dtype=bool)

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        if self._states is None:
            self._allocate()
        if not math.isfinite(t.reward):
            raise InvalidInputError("reward must be finite")
        i = self._next
        self._states[i] = t.state
        self._actions[i] = t.action
        self._rewards[i] = t.reward
        self._next_states[i] = t.next_state
        self._terminals[i] = t.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _batch(self, idx):
        return Minibatch(self._states[idx].copy(), self._actions[idx].copy(), self._rewards[idx].copy(),
                         self._next_states[idx].copy(), self._terminals[idx].copy())

    def sample(self, batch_size, rng) -> Minibatch:
        if self.size == 0:
            raise InvalidInputError("cannot sample from an empty buffer")
        return self._batch(rng.integers(0, self.size, size=batch_size))

    def contents(self) -> Minibatch:
        """All stored transitions, oldest first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return self._batch(idx)


@dataclass
class TrainConfig:
    q_lr: float = 0.001
    policy_lr: float = 0.0001
    batch_size: int = 64
    min_pool: int = 10_000
    epoch_length: int = 10_000
    n_epochs: int = 100
    gamma: float = 0.99
    alpha: float = 1.0
    k: int = 32
    m: int = 32
    k_v: int = 50
    target_update_interval: int = 1000
    ou_theta: float = 0.15
    ou_sigma: float = 0.3
    proposal_switch_epoch: int = 10
    svgd_enabled: bool = True
    seed: int = 0
    replay_capacity: int = 1_000_000
    hidden_sizes: tuple = (200, 200)
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.validate()

    def validate(self):
        for name in ("q_lr", "policy_lr", "alpha"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("batch_size", "epoch_length", "k", "m", "k_v", "target_update_interval",
                     "replay_capacity"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        for name in ("n_epochs", "min_pool", "proposal_switch_epoch", "checkpoint_interval"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInputError("gamma must lie strictly inside (0, 1)")
        if self.ou_theta < 0 or self.ou_sigma < 0:
            raise InvalidInputError("OU parameters must be non-negative")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise InvalidInputError("hidden_sizes must be positive widths")


@dataclass
class OuNoise:
    """Ornstein-Uhlenbeck process with unit timestep and zero mean."""

    dim: int
    theta: float = 0.15
    sigma: float = 0.3
    state: np.ndarray = None

    def __post_init__(self):
        if self.state is None:
            self.state = np.zeros(self.dim)
        self.state = np.asarray(self.state, dtype=np.float64).copy()

    def reset(self):
        self.state = np.zeros(self.dim)


def ou_step(noise: OuNoise, rng) -> np.ndarray:
    noise.state = noise.state - noise.theta * noise.state + noise.sigma * rng.standard_normal(noise.dim)
    return noise.state.copy()


@dataclass
class MetricsRow:
    epoch: int
    mean_return: float
    mean_disc_return: float
    q_loss: float
    mean_soft_value: float
    seconds: float

    def csv_fields(self, wall_clock=True):
        def fmt(x):
            return repr(float(x))
        return [str(self.epoch), fmt(self.mean_return), fmt(self.mean_disc_return), fmt(self.q_loss),
                fmt(self.mean_soft_value), fmt(self.seconds) if wall_clock else ""]


def write_metrics(path, rows, wall_clock=False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.csv_fields(wall_clock))
    return path


def read_metrics(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise InvalidInputError(f"unexpected metrics header in {path}")
        for rec in reader:
            rows.append(MetricsRow(int(rec["epoch"]), float(rec["mean_return"]),
                                   float(rec["mean_disc_return"]), float(rec["q_loss"]),
                                   float(rec["mean_soft_value"]),
                                   float(rec["seconds"]) if rec["seconds"] else math.nan))
    return rows


def q_values(q_params: MlpParams, states, actions) -> np.ndarray:
    x = np.concatenate([np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)], axis=-1)
    return mlp_forward(q_params, x)[:, 0]


def make_q_network(state_dim, action_dim, rng, hidden=(200, 200)) -> MlpParams:
    return init_mlp(state_dim + action_dim, 1, rng, hidden=hidden)


def estimate_soft_value(q_params, next_states, proposal, alpha, k_v, rng,
                        action_low=-1.0, action_high=1.0, counters=None, action_dim=None) -> np.ndarray:
    """Importance-sampled ``alpha log E_q[exp(Q(s, a') / alpha) / q(a')]`` per state.

    ``q_params`` is a Q-network or any callable ``q(states, actions)``
    returning one value per row (then ``action_dim`` must be given).
    ``proposal`` is ``"uniform"`` (over the action box) or a
    :class:`SamplerNetwork`.  States where any sampler draw has a singular
    Jacobian are re-estimated with the uniform proposal and counted in
    ``counters["density_fallbacks"]``.
    """
    if k_v < 1:
        raise InvalidInputError("k_v must be at least 1")
    if not alpha > 0:
        raise InvalidInputError("alpha must be positive")
    states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    b, ds = states.shape
    if isinstance(q_params, MlpParams):
        d = q_params.in_dim - ds
        q_fn = lambda s, a: q_values(q_params, s, a)  # noqa: E731
    else:
        if action_dim is None:
            raise InvalidInputError("action_dim is required with a callable Q")
        d, q_fn = int(action_dim), q_params
    if d < 1:
        raise InvalidInputError("state width leaves no room for actions in the Q-network input")
    log_vol = d * math.log(action_high - action_low)
    rep = np.repeat(states, k_v, axis=0)

    def uniform_draws(n_states):
        acts = rng.uniform(action_low, action_high, size=(n_states * k_v, d))
        return acts, np.full(n_states * k_v, -log_vol)

    if isinstance(proposal, SamplerNetwork):
        xi = rng.standard_normal((b * k_v, proposal.noise_dim))
        actions = proposal(rep, xi)
        log_q, ok = action_log_densities(proposal, rep, xi)
        bad = ~ok.reshape(b, k_v).all(axis=1)
        if bad.any():
            n_bad = int(bad.sum())
            if counters is not None:
                counters["density_fallbacks"] = counters.get("density_fallbacks", 0) + n_bad
            rows = np.repeat(bad, k_v)
            actions[rows], log_q[rows] = uniform_draws(n_bad)
    elif proposal == "uniform":
        actions, log_q = uniform_draws(b)
    else:
        raise InvalidInputError(f"unknown proposal {proposal!r}")

    scaled = (np.asarray(q_fn(rep, actions), dtype=np.float64).reshape(-1) / alpha - log_q).reshape(b, k_v)
    top = scaled.max(axis=1)
    lse = top + np.log(np.sum(np.exp(scaled - top[:, None]), axis=1))
    return alpha * (lse - math.log(k_v))


def q_loss_and_grad(q_params: MlpParams, target_params: MlpParams, batch: Minibatch, gamma, alpha, k_v,
                    proposal, rng, action_low=-1.0, action_high=1.0, stats=None):
    """Mean squared soft Bellman error ``0.5 (y - Q(s, a))^2`` and its gradient.

    ``y = r + gamma (1 - terminal) V_target(s')`` is held constant.
    """
    if len(batch) == 0:
        raise InvalidInputError("empty minibatch")
    v_next = estimate_soft_value(target_params, batch.next_states, proposal, alpha, k_v, rng,
                                 action_low, action_high, counters=stats)
    target = batch.rewards + gamma * (~batch.terminals.astype(bool)) * v_next
    x = np.concatenate([batch.states, batch.actions], axis=1)
    q, cache = mlp_forward(q_params, x, return_cache=True)
    err = target - q[:, 0]
    n = len(batch)
    loss = float(0.5 * np.mean(err * err))
    grads, _ = mlp_backward(q_params, x, (-err / n)[:, None], cache=cache)
    if stats is not None:
        stats["soft_value"] = float(np.mean(v_next))
    return loss, grads


class Agent:
    """Networks, targets and optimizers owned by one trainer."""

    def __init__(self, state_dim, action_dim, config: TrainConfig, rng):
        hidden = config.hidden_sizes
        self.q = make_q_network(state_dim, action_dim, rng, hidden)
        self.sampler = SamplerNetwork.create(state_dim, action_dim, rng, hidden)
        self.q_target = self.q.copy()
        # kept for checkpoint fidelity; nothing reads the sampler target
        self.sampler_target = self.sampler.params.copy()
        self.q_opt = Adam(self.q, config.q_lr)
        self.policy_opt = Adam(self.sampler.params, config.policy_lr)

    def networks(self) -> dict:
        return {"q": self.q, "q_target": self.q_target,
                "sampler": self.sampler.params, "sampler_target": self.sampler_target}

    def update_targets(self):
        self.q_target = self.q.copy()
        self.sampler_target = self.sampler.params.copy()


def collect_step(env, sampler: SamplerNetwork, noise: OuNoise, buffer: ReplayBuffer, rng,
                 uniform=False, env_rng=None) -> Transition:
    """Act once in ``env``, store the transition, and return it.

    A finished episode is reset first (with ``env_rng`` for the start
    jitter) and the OU state is zeroed.  With ``uniform`` the action is
    drawn uniformly from the action box instead of from the sampler.
    """
    if env.done:
        env.reset(env_rng if env_rng is not None else rng)
        noise.reset()
    state = env.position.copy()
    if uniform:
        action = rng.uniform(env.action_low, env.action_high, size=env.action_dim)
    else:
        xi = rng.standard_normal((1, sampler.noise_dim))
        action = sampler(state[None, :], xi)[0] + ou_step(noise, rng)
        action = np.clip(action, env.action_low, env.action_high)
    next_state, reward, done = env.step(action)
    t = Transition(state, action, reward, next_state, terminal=bool(env.captured), episode_end=bool(done))
    buffer.push(t)
    return t


@dataclass
class TrainResult:
    metrics: list
    checkpoints: list = field(default_factory=list)
    agent: Agent = None
    counters: dict = field(default_factory=dict)


def _dump_and_abort(agent, out_dir, epoch, step, what):
    dump = None
    if out_dir is not None:
        dump = save_checkpoint(Path(out_dir) / "nan_dump.npz", agent.networks(),
                               {"epoch": epoch, "step": step, "where": what})
    raise NumericAbort(f"non-finite parameters after {what} update (epoch {epoch}, step {step})", dump)


def train(config: TrainConfig, env, out_dir=None, metrics_sink=None, progress=False) -> TrainResult:
    """Run soft Q-learning on ``env`` for ``config.n_epochs`` epochs.

    Returns the per-epoch metrics and a list of ``(epoch, networks)``
    snapshots: the initial one plus one every ``checkpoint_interval``
    epochs (and the final epoch).  With ``out_dir`` the snapshots are also
    written as ``checkpoint_XXXX.npz``.  ``metrics_sink``, if given, is
    called with each :class:`MetricsRow` as it is produced (a
    ``queue.Queue().put`` works).
    """
    config.validate()
    seed = config.seed
    rng_init = substream(seed, "init")
    rng_env = substream(seed, "env")
    rng_noise = substream(seed, "noise")
    rng_policy = substream(seed, "policy")
    rng_batch = substream(seed, "minibatch")
    rng_value = substream(seed, "value")
    rng_svgd = substream(seed, "svgd")

    ds, da = env.state_dim, env.action_dim
    agent = Agent(ds, da, config, rng_init)
    buffer = ReplayBuffer(ds, da, config.replay_capacity)
    noise = OuNoise(da, config.ou_theta, config.ou_sigma)
    counters = {"density_fallbacks": 0, "q_updates": 0, "policy_updates": 0, "target_copies": 0}
    meta = {"state_dim": ds, "action_dim": da, "hidden_sizes": list(config.hidden_sizes),
            "seed": seed, "alpha": config.alpha}

    checkpoints = []

    def snapshot(epoch):
        nets = {k: v.copy() for k, v in agent.networks().items()}
        checkpoints.append((epoch, nets))
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"checkpoint_{epoch:04d}.npz", nets, dict(meta, epoch=epoch))

    snapshot(0)
    if config.svgd_enabled:
        m, k, alpha_policy, shared = config.m, config.k, config.alpha, False
    else:
        m, k, alpha_policy, shared = 1, 1, 0.0, True

    env.done = True
    episode_return = episode_disc = 0.0
    episode_len = 0
    total_steps = 0
    metrics = []
    for epoch in range(1, config.n_epochs + 1):
        t0 = time.perf_counter()
        returns, disc_returns, losses, values = [], [], [], []
        proposal = agent.sampler if epoch > config.proposal_switch_epoch else "uniform"
        for _ in range(config.epoch_length):
            warmup = buffer.size < config.min_pool
            t = collect_step(env, agent.sampler, noise, buffer, rng_policy, uniform=warmup, env_rng=rng_env)
            episode_return += t.reward
            episode_disc += config.gamma ** episode_len * t.reward
            episode_len += 1
            if t.episode_end:
                returns.append(episode_return)
                disc_returns.append(episode_disc)
                episode_return = episode_disc = 0.0
                episode_len = 0
            total_steps += 1

            if buffer.size >= config.min_pool:
                batch = buffer.sample(config.batch_size, rng_batch)
                stats = {}
                loss, grads = q_loss_and_grad(agent.q, agent.q_target, batch, config.gamma, config.alpha,
                                              config.k_v, proposal, rng_value, env.action_low,
                                              env.action_high, stats=stats)
                agent.q_opt.step(agent.q, grads)
                counters["density_fallbacks"] += stats.get("density_fallbacks", 0)
                counters["q_updates"] += 1
                losses.append(loss)
                values.append(stats["soft_value"])
                if not agent.q.all_finite():
                    _dump_and_abort(agent, out_dir, epoch, total_steps, "Q-function")

                pgrad, _ = amortized_policy_gradient(agent.sampler, batch.states, agent.q, m, k,
                                                     alpha_policy, rng_svgd, shared_noise=shared)
                for g in pgrad.arrays():
                    np.negative(g, out=g)
                agent.policy_opt.step(agent.sampler.params, pgrad)
                counters["policy_updates"] += 1
                if not agent.sampler.params.all_finite():
                    _dump_and_abort(agent, out_dir, epoch, total_steps, "sampler")

            if total_steps % config.target_update_interval == 0:
                agent.update_targets()
                counters["target_copies"] += 1

        row = MetricsRow(epoch,
                         float(np.mean(returns)) if returns else math.nan,
                         float(np.mean(disc_returns)) if disc_returns else math.nan,
                         float(np.mean(losses)) if losses else math.nan,
                         float(np.mean(values)) if values else math.nan,
                         time.perf_counter() - t0)
        metrics.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
        if progress:
            log.info("epoch %d  return %.3f  q_loss %.4g  V %.3f  (%.1fs)", row.epoch, row.mean_return,
                     row.q_loss, row.mean_soft_value, row.seconds)
        if (config.checkpoint_interval and epoch % config.checkpoint_interval == 0) or epoch == config.n_epochs:
            snapshot(epoch)
    return TrainResult(metrics=metrics, checkpoints=checkpoints, agent=agent, counters=counters)


def rollout_policy(env, sampler: SamplerNetwork, n_rollouts, rng, env_rng=None):
    """Sample-and-act rollouts without exploration noise.

    Returns ``(rows, final_goals)``: trajectory rows
    ``(episode, step, x, y, ax, ay, reward)`` (step 0 is the start
    position) and, per rollout, the index of the goal nearest to the final
    position.
    """
    rows, finals = [], []
    env_rng = rng if env_rng is None else env_rng
    for ep in range(n_rollouts):
        state = env.reset(env_rng)
        rows.append((ep, 0, state[0], state[1], 0.0, 0.0, 0.0))
        done = False
        while not done:
            xi = rng.standard_normal((1, sampler.noise_dim))
            action = sampler(state[None, :], xi)[0]
            state, reward, done = env.step(action)
            a = np.clip(action, env.action_low, env.action_high)
            rows.append((ep, env.steps, state[0], state[1], a[0], a[1], reward))
        finals.append(env.nearest_goal(state))
    return rows, finals


def goal_occupancy(final_goals, n_goals=4) -> np.ndarray:
    """Fraction of rollouts ending nearest to each goal (zeros when there are none)."""
    counts = np.bincount(np.asarray(final_goals, dtype=int), minlength=n_goals).astype(float)
    return counts / len(final_goals) if len(final_goals) else counts


def config_replace(config: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(config, **changes)
