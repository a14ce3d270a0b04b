"""MADDPG: decentralized actors, centralized critics, shared replay buffer.

Actions are relaxed categorical vectors: the actor emits 5 logits, exploration
adds scaled Gumbel noise to them, and a softmax maps the result onto the
simplex. The environment consumes the simplex vector directly, which keeps the
policy differentiable through the critic's action input.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import N_ACTIONS, ParticleWorld
from .nn import (
    Adam,
    Network,
    TrainingDivergence,
    clip_by_global_norm,
    init_network,
    soft_update,
    softmax,
    softmax_backward,
)


class EmptyBufferError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.95
    tau: float = 0.01
    target_period: int = 10
    batch_size: int = 1024
    buffer_capacity: int = 1_000_000
    warmup: int = 1024
    actor_lr: float = 1e-2
    critic_lr: float = 1.5e-2
    hidden: int = 64
    grad_clip: float | None = 0.5
    noise_start: float = 1.0
    noise_end: float = 0.05
    noise_decay_fraction: float = 0.5  # of total training episodes
    update_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.target_period < 1:
            raise ValueError("target_period must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.update_every < 1:
            raise ValueError("batch_size, buffer_capacity and update_every must be >= 1")

    def noise_scale(self, episode: int, total_episodes: int) -> float:
        horizon = self.noise_decay_fraction * total_episodes
        if horizon <= 0:
            return self.noise_end
        frac = min(1.0, episode / horizon)
        return self.noise_start + (self.noise_end - self.noise_start) * frac


@dataclass
class Transition:
    obs: np.ndarray  # (n_agents, obs_dim)
    actions: np.ndarray  # (n_agents, 5)
    rewards: np.ndarray  # (n_agents,)
    next_obs: np.ndarray  # (n_agents, obs_dim)
    done: bool = False


@dataclass
class Batch:
    obs: np.ndarray  # (B, n_agents, obs_dim)
    actions: np.ndarray  # (B, n_agents, 5)
    rewards: np.ndarray  # (B, n_agents)
    next_obs: np.ndarray
    done: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return len(self.done)

    def transition(self, k: int) -> Transition:
        return Transition(self.obs[k], self.actions[k], self.rewards[k], self.next_obs[k], bool(self.done[k]))


class ReplayBuffer:
    """Ring buffer of joint transitions; storage grows on demand up to capacity."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, n_actions: int = N_ACTIONS):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.cursor = 0
        self.size = 0
        self._alloc(min(capacity, 4096))

    def _alloc(self, rows: int) -> None:
        n, d, k = self.n_agents, self.obs_dim, self.n_actions
        new = {
            "obs": np.zeros((rows, n, d)),
            "actions": np.zeros((rows, n, k)),
            "rewards": np.zeros((rows, n)),
            "next_obs": np.zeros((rows, n, d)),
            "done": np.zeros(rows, dtype=bool),
        }
        if hasattr(self, "obs"):
            for name, arr in new.items():
                arr[: self.size] = getattr(self, name)[: self.size]
        for name, arr in new.items():
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        obs = np.asarray(t.obs, dtype=np.float64)
        act = np.asarray(t.actions, dtype=np.float64)
        rew = np.asarray(t.rewards, dtype=np.float64)
        nxt = np.asarray(t.next_obs, dtype=np.float64)
        if (obs.shape != (self.n_agents, self.obs_dim) or nxt.shape != obs.shape
                or act.shape != (self.n_agents, self.n_actions) or rew.shape != (self.n_agents,)):
            raise ValueError("transition arity does not match buffer layout")
        if self.cursor >= len(self.done):
            self._alloc(min(self.capacity, 2 * len(self.done)))
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = act
        self.rewards[i] = rew
        self.next_obs[i] = nxt
        self.done[i] = bool(t.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.gather(idx)

    def gather(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.done[idx])

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.size)]
        b = self.gather(order)
        return [b.transition(k) for k in range(self.size)]


class AgentLearner:
    def __init__(self, index: int, n_agents: int, obs_dim: int, config: TrainConfig,
                 seed: int | np.random.Generator, role: str = "agent"):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        h = config.hidden
        self.index = index
        self.role = role
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.actor = init_network([obs_dim, h, h, N_ACTIONS], rng)
        self.critic = init_network([self.critic_in, h, h, 1], rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params(), config.actor_lr)
        self.critic_opt = Adam(self.critic.params(), config.critic_lr)

    @property
    def critic_in(self) -> int:
        return self.n_agents * (self.obs_dim + N_ACTIONS)

    @property
    def action_slot(self) -> slice:
        start = self.n_agents * self.obs_dim + self.index * N_ACTIONS
        return slice(start, start + N_ACTIONS)

    def networks(self) -> dict[str, Network]:
        return {"actor": self.actor, "critic": self.critic,
                "target_actor": self.target_actor, "target_critic": self.target_critic}


def act(learner: AgentLearner, obs: np.ndarray, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != learner.obs_dim:
        raise ValueError(f"observation width {obs.shape[-1]} != actor input {learner.obs_dim}")
    logits = learner.actor(obs)
    if noise_scale > 0:
        logits = logits + noise_scale * rng.gumbel(size=logits.shape)
    return softmax(logits)


def critic_input(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    b = obs.shape[0]
    return np.concatenate([obs.reshape(b, -1), actions.reshape(b, -1)], axis=1)


def target_actions(target_actors: Sequence[Network], next_obs: np.ndarray) -> np.ndarray:
    return np.stack([softmax(net(next_obs[:, j])) for j, net in enumerate(target_actors)], axis=1)


def critic_targets(learner: AgentLearner, batch: Batch, next_actions: np.ndarray, gamma: float,
                   next_input: np.ndarray | None = None) -> np.ndarray:
    r = batch.rewards[:, learner.index]
    if next_input is None:
        next_input = critic_input(batch.next_obs, next_actions)
    q_next = learner.target_critic(next_input)[:, 0]
    return np.where(batch.done, r, r + gamma * q_next)


def critic_update(learner: AgentLearner, batch: Batch, target_actors: Sequence[Network] | None,
                  config: TrainConfig, next_actions: np.ndarray | None = None,
                  inputs: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """One regression step of Q_i toward r_i + gamma * Q'_i(o', mu'(o')); returns the pre-step loss.

    ``inputs`` optionally carries precomputed (critic input, target critic
    input) so several agents can share them.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if inputs is None:
        if next_actions is None:
            next_actions = target_actions(target_actors, batch.next_obs)
        inputs = (critic_input(batch.obs, batch.actions), critic_input(batch.next_obs, next_actions))
    x, x_next = inputs
    y = critic_targets(learner, batch, None, config.gamma, next_input=x_next)
    q, tape = learner.critic.forward(x)
    resid = q[:, 0] - y
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise TrainingDivergence(f"critic loss of agent {learner.index} is not finite")
    grads, _ = learner.critic.backward(tape, (2.0 / len(batch)) * resid[:, None], need_input=False)
    learner.critic_opt.step(learner.critic.params(), clip_by_global_norm(grads, config.grad_clip))
    return loss


def actor_objective_and_grads(learner: AgentLearner, batch: Batch,
                              x: np.ndarray | None = None) -> tuple[float, list[np.ndarray]]:
    """Mean Q with agent i's action replaced by its current policy, and d(-mean Q)/d theta_i."""
    i = learner.index
    logits, atape = learner.actor.forward(batch.obs[:, i])
    a_i = softmax(logits)
    x = critic_input(batch.obs, batch.actions) if x is None else x.copy()
    x[:, learner.action_slot] = a_i
    q, ctape = learner.critic.forward(x)
    objective = float(np.mean(q))
    b = len(batch)
    _, g_a = learner.critic.backward(ctape, np.full((b, 1), -1.0 / b), need_params=False,
                                     input_columns=learner.action_slot)
    grads, _ = learner.actor.backward(atape, softmax_backward(a_i, g_a), need_input=False)
    return objective, grads


def actor_update(learner: AgentLearner, batch: Batch, config: TrainConfig, x: np.ndarray | None = None) -> float:
    """Ascend mean Q through the action slot; returns the pre-step objective."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    objective, grads = actor_objective_and_grads(learner, batch, x)
    if not np.isfinite(objective):
        raise TrainingDivergence(f"actor objective of agent {learner.index} is not finite")
    learner.actor_opt.step(learner.actor.params(), clip_by_global_norm(grads, config.grad_clip))
    return objective


def sync_targets(learners: Sequence[AgentLearner], config: TrainConfig, global_step: int) -> bool:
    if global_step % config.target_period != 0:
        return False
    for lr in learners:
        soft_update(lr.target_actor, lr.actor, config.tau)
        soft_update(lr.target_critic, lr.critic, config.tau)
    return True


class MADDPG:
    """All agents' learners plus the shared replay buffer and step counters."""

    def __init__(self, n_agents: int, obs_dim: int, config: TrainConfig, seed: int,
                 roles: Sequence[str] | None = None):
        rng = np.random.default_rng(seed)
        roles = list(roles) if roles is not None else ["agent"] * n_agents
        self.config = config
        self.learners = [AgentLearner(i, n_agents, obs_dim, config, rng, roles[i]) for i in range(n_agents)]
        self.buffer = ReplayBuffer(config.buffer_capacity, n_agents, obs_dim)
        self.global_step = 0
        self.updates = 0
        self.target_syncs = 0

    @property
    def n_agents(self) -> int:
        return len(self.learners)

    def act_all(self, obs: np.ndarray, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
        return np.stack([act(lr, obs[i], noise_scale, rng) for i, lr in enumerate(self.learners)])

    def learn(self, rng: np.random.Generator) -> dict | None:
        """One critic and one actor step per agent on a shared sampled batch."""
        cfg = self.config
        if len(self.buffer) < max(cfg.warmup, 1):
            return None
        batch = self.buffer.sample(cfg.batch_size, rng)
        nxt = target_actions([lr.target_actor for lr in self.learners], batch.next_obs)
        x = critic_input(batch.obs, batch.actions)
        inputs = (x, critic_input(batch.next_obs, nxt))
        closs = [critic_update(lr, batch, None, cfg, inputs=inputs) for lr in self.learners]
        aobj = [actor_update(lr, batch, cfg, x) for lr in self.learners]
        self.updates += 1
        return {"critic_loss": closs, "actor_objective": aobj}

    def after_env_step(self, rng: np.random.Generator) -> None:
        """Count a training step, learn once warm, and sync targets on schedule."""
        self.global_step += 1
        if self.global_step % self.config.update_every == 0:
            self.learn(rng)
        if sync_targets(self.learners, self.config, self.global_step):
            self.target_syncs += 1


@dataclass
class EpisodeStats:
    external: np.ndarray
    intrinsic: np.ndarray
    steps: int = 0
    transitions: int = 0
    seconds: float = 0.0
    exploration: object = None
    events: dict = field(default_factory=lambda: {"catches": 0, "border": 0})


def run_episode(env: ParticleWorld, team: MADDPG, rng: np.random.Generator, *, icm=None, goexplore=None,
                noise_scale: float = 0.0, learn: bool = True, seed: int | None = None,
                steps: int | None = None, store: bool = True) -> EpisodeStats:
    """Roll out one episode, optionally learning and running an exploration phase.

    ``icm`` is a per-agent list of :class:`~marl_curiosity.icm.CuriosityModule`
    (or None); ``goexplore`` a :class:`~marl_curiosity.archive.GoExplore`.
    Stored rewards are external plus intrinsic; the returned stats keep the
    two apart.
    """
    t0 = time.perf_counter()
    n = team.n_agents
    length = env.config.episode_length if steps is None else steps
    stats = EpisodeStats(np.zeros(n), np.zeros(n))
    if seed is None:
        seed = int(rng.integers(0, 2**63 - 1))
    state = env.reset(seed)
    obs = env.observe_all(state)
    if goexplore is not None:
        goexplore.begin_episode(state, max(length, 1))
    for _ in range(length):
        actions = team.act_all(obs, noise_scale, rng)
        state, ext, events = env.step(state, actions)
        nxt = env.observe_all(state)
        intr = np.zeros(n)
        if icm is not None:
            intr = np.array([m.step(obs[i], actions[i], nxt[i], learn=learn) for i, m in enumerate(icm)])
        stats.external += ext
        stats.intrinsic += intr
        stats.events["catches"] += len(events.catches)
        stats.events["border"] += len(events.border_violations)
        if store:
            team.buffer.push(Transition(obs, actions, ext + intr, nxt, False))
            stats.transitions += 1
        if goexplore is not None:
            goexplore.record_step(state, actions, ext)
        if learn:
            team.after_env_step(rng)
        obs = nxt
        stats.steps += 1
    if goexplore is not None and length > 0:
        stats.exploration = goexplore.exploration_phase(env, team.buffer, rng, icm=icm)
        stats.transitions += stats.exploration.transitions
    stats.seconds = time.perf_counter() - t0
    return stats
