"""Go-Explore style archive and the post-episode exploration phase.

Cells are keyed by the floor-binned positions of every movable entity. Each
cell keeps the shortest known trajectory reaching it; selection favours
rarely visited cells with weight 1 / (1 + visit_count). The "go" step either
restores the cell's snapshot or replays its stored actions from the episode
start state the trajectory began at; the simulator is deterministic after
reset, so both land on the same state.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .env import LANDMARK, N_ACTIONS, ParticleWorld, WorldState, restore, snapshot
from .maddpg import ReplayBuffer, Transition

log = logging.getLogger(__name__)

CellKey = tuple


class ArchiveError(ValueError):
    pass


def cell_key(state: WorldState, resolution: float = 0.1) -> CellKey:
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    movable = state.positions[state.kinds != LANDMARK]
    return tuple(int(b) for b in np.floor(movable / resolution).ravel())


class Path:
    """Immutable action/reward history stored as a chain of shared segments.

    Archive cells reached during one episode share the episode's arrays, so a
    cell costs O(1) memory regardless of trajectory length.
    """

    __slots__ = ("parent", "actions", "rewards", "length")

    def __init__(self, actions, rewards, parent: "Path | None" = None):
        actions = np.asarray(actions, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        if len(actions) != len(rewards):
            raise ArchiveError("action and reward sequences differ in length")
        self.parent = parent
        self.actions = actions
        self.rewards = rewards
        self.length = len(actions) + (parent.length if parent is not None else 0)

    def __len__(self) -> int:
        return self.length

    def _segments(self):
        node, out = self, []
        while node is not None:
            out.append(node)
            node = node.parent
        return out[::-1]

    def action_array(self) -> np.ndarray:
        segs = [s.actions for s in self._segments() if len(s.actions)]
        return np.concatenate(segs) if segs else np.zeros((0, 0, N_ACTIONS))

    def reward_array(self) -> np.ndarray:
        segs = [s.rewards for s in self._segments() if len(s.rewards)]
        return np.concatenate(segs) if segs else np.zeros((0, 0))


EMPTY_PATH = Path(np.zeros((0, 0, N_ACTIONS)), np.zeros((0, 0)))


@dataclass
class CellRecord:
    snapshot: bytes
    trajectory_len: int
    path: Path
    visit_count: int = 1
    origin: bytes | None = None  # snapshot of the state the trajectory starts from

    @property
    def action_sequence(self) -> np.ndarray:
        return self.path.action_array()

    @property
    def reward_sequence(self) -> np.ndarray:
        return self.path.reward_array()


@dataclass
class Archive:
    resolution: float = 0.1
    cells: dict = field(default_factory=dict)
    total_inserts: int = 0
    total_updates: int = 0

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, key) -> bool:
        return key in self.cells


def insert_or_update(archive: Archive, state: WorldState, trajectory_len: int, path: Path | None = None,
                     origin: bytes | None = None) -> str:
    """Returns "inserted", "improved" or "visited"."""
    if path is None:
        path = EMPTY_PATH if trajectory_len == 0 else None
    if path is None or len(path) != trajectory_len or trajectory_len < 0:
        raise ArchiveError("trajectory length does not match the action/reward sequences")
    key = cell_key(state, archive.resolution)
    rec = archive.cells.get(key)
    if rec is None:
        archive.cells[key] = CellRecord(snapshot(state), trajectory_len, path, 1, origin)
        archive.total_inserts += 1
        return "inserted"
    rec.visit_count += 1
    if trajectory_len < rec.trajectory_len:
        rec.snapshot = snapshot(state)
        rec.trajectory_len = trajectory_len
        rec.path = path
        rec.origin = origin
        archive.total_updates += 1
        return "improved"
    return "visited"


def selection_weights(visit_counts: Iterable[int]) -> np.ndarray:
    w = 1.0 / (1.0 + np.asarray(list(visit_counts), dtype=np.float64))
    return w / w.sum()


def select_cell(archive: Archive, rng: np.random.Generator) -> CellRecord:
    if not archive.cells:
        raise ArchiveError("cannot select from an empty archive")
    records = list(archive.cells.values())
    p = selection_weights(r.visit_count for r in records)
    return records[rng.choice(len(records), p=p)]


@dataclass
class PhaseStats:
    start_key: CellKey | None = None
    fresh_reset: bool = False
    new: int = 0
    improved: int = 0
    visited: int = 0
    transitions: int = 0
    intrinsic: np.ndarray | None = None
    start_state: WorldState | None = None


def random_joint_action(n_agents: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random one-hot move for each agent."""
    return np.eye(N_ACTIONS)[rng.integers(0, N_ACTIONS, size=n_agents)]


GO_MODES = ("restore", "replay")


def go_to(env: ParticleWorld, rec: CellRecord, mode: str = "restore") -> WorldState:
    """Reach an archived cell by snapshot restore or by replaying its actions from the origin."""
    if mode == "restore":
        return restore(rec.snapshot)
    if mode != "replay":
        raise ValueError(f"go mode must be one of {GO_MODES}")
    if rec.origin is None:
        raise ArchiveError("cell has no origin snapshot to replay from")
    state = restore(rec.origin)
    for joint in rec.action_sequence:
        state, _, _ = env.step(state, joint)
    return state


def exploration_phase(env: ParticleWorld, archive: Archive, buffer: ReplayBuffer, steps: int,
                      rng: np.random.Generator, icm=None, go: str = "restore") -> PhaseStats:
    """Go to an archived cell and explore from it with random actions for ``steps`` steps.

    Every step's transition goes into ``buffer`` with external plus (when
    ``icm`` is given) intrinsic reward; curiosity models are not trained here.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    stats = PhaseStats()
    if steps == 0:
        return stats
    n = env.n_agents
    if archive.cells:
        rec = select_cell(archive, rng)
        state = go_to(env, rec, go)
        base_len, base_path, origin = rec.trajectory_len, rec.path, rec.origin
        stats.start_key = cell_key(state, archive.resolution)
    else:
        log.info("archive empty; exploring from a fresh reset")
        state = env.reset(int(rng.integers(0, 2**63 - 1)))
        base_len, base_path, origin = 0, EMPTY_PATH, snapshot(state)
        stats.fresh_reset = True
    stats.start_state = state
    actions_seg = np.zeros((steps, n, N_ACTIONS))
    rewards_seg = np.zeros((steps, n))
    stats.intrinsic = np.zeros(n)
    obs = env.observe_all(state)
    for k in range(steps):
        joint = random_joint_action(n, rng)
        state, ext, _ = env.step(state, joint)
        nxt = env.observe_all(state)
        intr = np.zeros(n)
        if icm is not None:
            intr = np.array([m.step(obs[i], joint[i], nxt[i], learn=False) for i, m in enumerate(icm)])
        buffer.push(Transition(obs, joint, ext + intr, nxt, False))
        stats.transitions += 1
        stats.intrinsic += intr
        actions_seg[k] = joint
        rewards_seg[k] = ext
        path = Path(actions_seg[: k + 1], rewards_seg[: k + 1], base_path)
        outcome = insert_or_update(archive, state, base_len + k + 1, path, origin)
        if outcome == "inserted":
            stats.new += 1
        elif outcome == "improved":
            stats.improved += 1
        else:
            stats.visited += 1
        obs = nxt
    return stats


class GoExplore:
    """Archive bookkeeping across one training run plus the per-episode phase."""

    def __init__(self, steps: int, resolution: float = 0.1, go: str = "restore"):
        if go not in GO_MODES:
            raise ValueError(f"go mode must be one of {GO_MODES}")
        self.steps = steps
        self.go = go
        self._origin: bytes | None = None
        self.archive = Archive(resolution)
        self._actions = np.zeros((0, 0, N_ACTIONS))
        self._rewards = np.zeros((0, 0))
        self._t = 0

    def begin_episode(self, state: WorldState, expected_len: int = 128) -> None:
        n = int(np.count_nonzero(state.kinds != LANDMARK))
        # fresh arrays each episode: earlier cells keep views of the old ones
        self._actions = np.zeros((expected_len, n, N_ACTIONS))
        self._rewards = np.zeros((expected_len, n))
        self._t = 0
        self._origin = snapshot(state)
        insert_or_update(self.archive, state, 0, EMPTY_PATH, self._origin)

    def record_step(self, state: WorldState, actions: np.ndarray, rewards: np.ndarray) -> None:
        t = self._t
        if t >= len(self._actions):
            grow = max(1, len(self._actions))
            self._actions = np.concatenate([self._actions, np.zeros((grow,) + self._actions.shape[1:])])
            self._rewards = np.concatenate([self._rewards, np.zeros((grow,) + self._rewards.shape[1:])])
        self._actions[t] = actions
        self._rewards[t] = rewards
        self._t = t + 1
        insert_or_update(self.archive, state, self._t, Path(self._actions[: self._t], self._rewards[: self._t]),
                         self._origin)

    def exploration_phase(self, env: ParticleWorld, buffer: ReplayBuffer, rng: np.random.Generator,
                          icm=None) -> PhaseStats:
        return exploration_phase(env, self.archive, buffer, self.steps, rng, icm=icm, go=self.go)


def dump_archive(archive: Archive, fp) -> int:
    """Write one JSON object per cell (snapshots omitted); returns the record count."""
    count = 0
    for key, rec in archive.cells.items():
        fp.write(json.dumps({"key": list(key), "trajectory_len": rec.trajectory_len,
                             "visit_count": rec.visit_count}) + "\n")
        count += 1
    return count
