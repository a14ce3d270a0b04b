"""Deterministic 2-D predator-prey particle world.

Entities are stored in a fixed order: predators, prey, landmarks. Only
predators and prey are agents; landmarks are static obstacles that push
overlapping movers away with a linear spring.

Observation layout for agent ``i`` (flat float64 vector, length
``4 + 5 * (n_entities - 1)``)::

    [x, y, vx, vy,
     for every other entity in world order:
         visible, dx, dy, dvx, dvy]

``dx, dy, dvx, dvy`` are relative to the observer and all five values are
exactly zero when the entity lies outside the observation radius (closed ball).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

PREDATOR, PREY, LANDMARK = 0, 1, 2
KIND_NAMES = {PREDATOR: "predator", PREY: "prey", LANDMARK: "landmark"}
N_ACTIONS = 5  # no-op, +x, -x, +y, -y

SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<IIQ4Q")  # version, n_entities, step_index, rng words


class InvalidAction(ValueError):
    pass


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    n_predators: int = 3
    n_prey: int = 1
    n_landmarks: int = 2
    dt: float = 0.1
    damping: float = 0.25
    mass_predator: float = 1.0
    mass_prey: float = 1.0
    force_gain: float = 3.0
    radius_predator: float = 0.075
    radius_prey: float = 0.05
    radius_landmark: float = 0.2
    max_speed_predator: float = 1.0
    max_speed_prey: float = 1.3
    contact_stiffness: float = 100.0
    observation_radius: float = 0.5
    border: float = 1.0
    episode_length: int = 100

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.observation_radius <= 0:
            raise ValueError("observation_radius must be positive")
        if self.n_predators < 1 or self.n_prey < 1 or self.n_landmarks < 0:
            raise ValueError("need at least one predator and one prey")

    @property
    def n_agents(self) -> int:
        return self.n_predators + self.n_prey

    @property
    def n_entities(self) -> int:
        return self.n_agents + self.n_landmarks

    @property
    def obs_dim(self) -> int:
        return 4 + 5 * (self.n_entities - 1)

    def kinds(self) -> np.ndarray:
        return np.array(
            [PREDATOR] * self.n_predators + [PREY] * self.n_prey + [LANDMARK] * self.n_landmarks,
            dtype=np.int64,
        )


@dataclass(frozen=True)
class EntityState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    max_speed: float
    kind: int


@dataclass(frozen=True)
class WorldState:
    """Full simulator state. Arrays are never mutated after construction."""

    positions: np.ndarray  # (n, 2)
    velocities: np.ndarray  # (n, 2)
    radii: np.ndarray  # (n,)
    max_speeds: np.ndarray  # (n,)
    kinds: np.ndarray  # (n,) int codes
    step_index: int = 0
    rng_state: tuple = (0, 0, 0, 0)  # PCG64 state/inc as four uint64 words

    @property
    def n_entities(self) -> int:
        return len(self.kinds)

    def entity(self, i: int) -> EntityState:
        return EntityState(self.positions[i], self.velocities[i], float(self.radii[i]),
                           float(self.max_speeds[i]), int(self.kinds[i]))

    def agent_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kinds != LANDMARK)

    def equals(self, other: "WorldState") -> bool:
        """Bit-exact equality of every field."""
        return (
            self.step_index == other.step_index
            and tuple(self.rng_state) == tuple(other.rng_state)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(
                    (self.positions, self.velocities, self.radii, self.max_speeds, self.kinds),
                    (other.positions, other.velocities, other.radii, other.max_speeds, other.kinds),
                )
            )
        )


def _in_collision(a: EntityState, b: EntityState) -> bool:
    return float(np.hypot(*(a.position - b.position))) < a.radius + b.radius


@dataclass
class RewardSpec:
    """External reward definition.

    ``pair_function(predator, prey)`` is summed over every predator/prey pair;
    the sum goes to each predator (plus ``base_delta``) and, negated, to each
    prey (minus ``base_delta``). Prey additionally pay ``border_penalty`` on
    every step they are outside the border.
    """

    pair_function: Callable[[EntityState, EntityState], float] | None = None
    base_delta: float = 0.0
    catch_reward: float = 10.0
    border_penalty: float = -10.0

    def h(self, predator: EntityState, prey: EntityState) -> float:
        if self.pair_function is not None:
            return float(self.pair_function(predator, prey))
        return self.catch_reward if _in_collision(predator, prey) else 0.0


@dataclass
class StepEvents:
    catches: list = field(default_factory=list)  # (predator_index, prey_index)
    border_violations: list = field(default_factory=list)  # prey indices


def _pack_rng(gen: np.random.Generator) -> tuple:
    st = gen.bit_generator.state["state"]
    mask = (1 << 64) - 1
    s, inc = st["state"], st["inc"]
    return (s >> 64, s & mask, inc >> 64, inc & mask)


def reset(config: EnvConfig, seed: int) -> WorldState:
    gen = np.random.Generator(np.random.PCG64(seed))
    kinds = config.kinds()
    n = len(kinds)
    positions = gen.uniform(-config.border, config.border, size=(n, 2))
    radii = np.choose(kinds, [config.radius_predator, config.radius_prey, config.radius_landmark]).astype(np.float64)
    max_speeds = np.choose(kinds, [config.max_speed_predator, config.max_speed_prey, 0.0]).astype(np.float64)
    return WorldState(positions, np.zeros((n, 2)), radii, max_speeds, kinds, 0, _pack_rng(gen))


def validate_actions(actions, n_agents: int) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float64)
    if a.shape != (n_agents, N_ACTIONS):
        raise InvalidAction(f"expected actions of shape ({n_agents}, {N_ACTIONS}), got {a.shape}")
    return a


def step(
    state: WorldState, actions, spec: RewardSpec, config: EnvConfig
) -> tuple[WorldState, np.ndarray, StepEvents]:
    """Advance one step; returns (next state, per-agent external rewards, events)."""
    agents = state.agent_indices()
    a = validate_actions(actions, len(agents))
    kinds = state.kinds
    masses = np.choose(kinds, [config.mass_predator, config.mass_prey, 1.0])

    force = np.zeros_like(state.positions)
    force[agents, 0] = a[:, 1] - a[:, 2]
    force[agents, 1] = a[:, 3] - a[:, 4]
    force *= config.force_gain

    # landmark contact: linear spring on overlap depth, pushing movers outward
    for lm in np.flatnonzero(kinds == LANDMARK):
        d = state.positions[agents] - state.positions[lm]
        dist = np.sqrt((d * d).sum(axis=1))
        depth = state.radii[agents] + state.radii[lm] - dist
        hit = (depth > 0.0) & (dist > 0.0)
        if hit.any():
            push = config.contact_stiffness * depth[hit] / dist[hit]
            force[agents[hit]] += push[:, None] * d[hit]

    vel = state.velocities * (1.0 - config.damping) + force / masses[:, None] * config.dt
    speed = np.sqrt((vel * vel).sum(axis=1))
    over = speed > state.max_speeds
    vel[over] *= (state.max_speeds[over] / speed[over])[:, None]
    vel[kinds == LANDMARK] = 0.0
    pos = state.positions + vel * config.dt
    pos[kinds == LANDMARK] = state.positions[kinds == LANDMARK]

    nxt = replace(state, positions=pos, velocities=vel, step_index=state.step_index + 1)
    rewards, events = compute_external_rewards(nxt, spec, config)
    return nxt, rewards, events


def compute_external_rewards(
    state: WorldState, spec: RewardSpec, config: EnvConfig | None = None
) -> tuple[np.ndarray, StepEvents]:
    border = config.border if config is not None else 1.0
    kinds = state.kinds
    predators = np.flatnonzero(kinds == PREDATOR)
    prey = np.flatnonzero(kinds == PREY)
    events = StepEvents()
    relative = 0.0
    for i in predators:
        ei = state.entity(i)
        for j in prey:
            ej = state.entity(j)
            relative += spec.h(ei, ej)
            if _in_collision(ei, ej):
                events.catches.append((int(i), int(j)))
    agents = state.agent_indices()
    rewards = np.empty(len(agents))
    for slot, idx in enumerate(agents):
        if kinds[idx] == PREDATOR:
            rewards[slot] = relative + spec.base_delta
        else:
            rewards[slot] = -relative - spec.base_delta
            if np.any(np.abs(state.positions[idx]) > border):
                rewards[slot] += spec.border_penalty
                events.border_violations.append(int(idx))
    return rewards, events


def observe(state: WorldState, agent_index: int, config: EnvConfig) -> np.ndarray:
    agents = state.agent_indices()
    if not 0 <= agent_index < len(agents):
        raise IndexError(f"agent index {agent_index} out of range")
    return observe_all(state, config)[agent_index]


def observe_all(state: WorldState, config: EnvConfig) -> np.ndarray:
    """Observations for every agent stacked into ``(n_agents, obs_dim)``."""
    agents = state.agent_indices()
    n = state.n_entities
    pos, vel = state.positions, state.velocities
    rel_p = pos[None, :, :] - pos[agents][:, None, :]  # (agents, n, 2)
    rel_v = vel[None, :, :] - vel[agents][:, None, :]
    dist = np.sqrt((rel_p * rel_p).sum(axis=2))
    visible = (dist <= config.observation_radius).astype(np.float64)
    block = np.concatenate([visible[..., None], rel_p, rel_v], axis=2) * visible[..., None]
    others = np.ones((len(agents), n), dtype=bool)
    others[np.arange(len(agents)), agents] = False
    block = block[others].reshape(len(agents), n - 1, 5)
    own = np.concatenate([pos[agents], vel[agents]], axis=1)
    return np.concatenate([own, block.reshape(len(agents), -1)], axis=1)


def snapshot(state: WorldState) -> bytes:
    """Encode a state as a versioned little-endian byte string.

    Layout: uint32 version, uint32 n_entities, uint64 step_index, 4 x uint64
    rng words, then per entity 7 float64 values: x, y, vx, vy, radius,
    max_speed, kind.
    """
    n = state.n_entities
    head = _SNAPSHOT_HEADER.pack(SNAPSHOT_VERSION, n, state.step_index, *state.rng_state)
    body = np.column_stack(
        [state.positions, state.velocities, state.radii, state.max_speeds, state.kinds.astype(np.float64)]
    ).astype("<f8")
    return head + body.tobytes()


def restore(blob: bytes) -> WorldState:
    if len(blob) < _SNAPSHOT_HEADER.size:
        raise SnapshotError("snapshot shorter than header")
    version, n, step_index, *rng = _SNAPSHOT_HEADER.unpack_from(blob)
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    expected = _SNAPSHOT_HEADER.size + n * 7 * 8
    if len(blob) != expected:
        raise SnapshotError(f"snapshot has {len(blob)} bytes, expected {expected}")
    body = np.frombuffer(blob, dtype="<f8", offset=_SNAPSHOT_HEADER.size).reshape(n, 7).astype(np.float64)
    kinds = body[:, 6].astype(np.int64)
    if not np.all(np.isin(kinds, (PREDATOR, PREY, LANDMARK))):
        raise SnapshotError("bad entity kind code")
    return WorldState(
        body[:, 0:2].copy(), body[:, 2:4].copy(), body[:, 4].copy(), body[:, 5].copy(),
        kinds, int(step_index), tuple(int(w) for w in rng),
    )


class ParticleWorld:
    """Bundles a config and reward spec so callers can pass one env object around."""

    def __init__(self, config: EnvConfig | None = None, spec: RewardSpec | None = None):
        self.config = config or EnvConfig()
        self.spec = spec or RewardSpec()

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def roles(self) -> list[str]:
        return [KIND_NAMES[k] for k in self.config.kinds()[: self.n_agents]]

    def reset(self, seed: int) -> WorldState:
        return reset(self.config, seed)

    def step(self, state: WorldState, actions) -> tuple[WorldState, np.ndarray, StepEvents]:
        return step(state, actions, self.spec, self.config)

    def observe_all(self, state: WorldState) -> np.ndarray:
        return observe_all(state, self.config)

    def observe(self, state: WorldState, agent_index: int) -> np.ndarray:
        return observe(state, agent_index, self.config)

    snapshot = staticmethod(snapshot)
    restore = staticmethod(restore)
