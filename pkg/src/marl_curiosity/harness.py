"""Experiment driver: configuration, training, evaluation, comparison and traces.

Config files are flat ``key = value`` text. Top-level keys are the fields of
:class:`ExperimentConfig`; nested settings use a dotted prefix, e.g.
``env.dt = 0.1``, ``train.batch_size = 256``, ``icm.eta = 0.05``. A
``preset = exp1`` line seeds every value from a preset before the remaining
keys are applied. ``#`` starts a comment.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import env as penv
from .archive import GoExplore, dump_archive
from .env import EnvConfig, ParticleWorld
from .icm import CuriosityModule, IcmConfig
from .maddpg import MADDPG, TrainConfig, run_episode
from .nn import CheckpointError, TrainingDivergence, load_network, save_network, tune_allocator

log = logging.getLogger(__name__)

METHODS = ("icm", "i-go-explore")
METRICS_HEADER = ["episode", "agent", "role", "ext_reward", "intr_reward", "ep_seconds", "total_seconds"]
TRACE_HEADER = ["episode", "step", "entity", "kind", "x", "y", "vx", "vy", "a0", "a1", "a2", "a3", "a4"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str = "icm"
    episodes: int = 500
    steps_per_episode: int = 100
    exploration_steps: int = 0
    eval_period: int = 5
    eval_episodes: int = 5
    test_episodes: int = 100
    test_steps: int = 100
    seed: int = 0
    use_icm: bool = True
    cell_resolution: float = 0.1
    go_mode: str = "restore"
    archive_dump_every: int = 0
    record_wall_time: bool = True
    out_dir: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    icm: IcmConfig = field(default_factory=IcmConfig)

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "icm" and self.exploration_steps != 0:
            raise ConfigError("exploration_steps must be 0 for method icm")
        if self.method == "i-go-explore" and self.exploration_steps < 0:
            raise ConfigError("exploration_steps must be >= 0")
        if self.eval_period < 1:
            raise ConfigError("eval_period must be >= 1")
        if self.eval_episodes < 1 or self.test_episodes < 1:
            raise ConfigError("eval_episodes and test_episodes must be >= 1")
        if self.episodes < 0 or self.steps_per_episode < 0 or self.test_steps < 0:
            raise ConfigError("episode and step counts must be >= 0")
        if self.cell_resolution <= 0:
            raise ConfigError("cell_resolution must be positive")
        if self.go_mode not in ("restore", "replay"):
            raise ConfigError("go_mode must be restore or replay")
        return self


PRESETS = {
    "exp1": dict(episodes=500, steps_per_episode=100, exploration_steps=50),
    "exp2": dict(episodes=100, steps_per_episode=20, exploration_steps=10, test_steps=20),
    "exp3-short": dict(episodes=100, steps_per_episode=100, exploration_steps=10, method="i-go-explore"),
    "exp3-long": dict(episodes=100, steps_per_episode=100, exploration_steps=50, method="i-go-explore"),
}


def preset(name: str, method: str | None = None, scale: float = 1.0, **overrides) -> ExperimentConfig:
    """Build a preset config. For ``method="icm"`` the exploration phase is dropped."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    if method is not None:
        values["method"] = method
    values.setdefault("method", "i-go-explore")
    if values["method"] == "icm":
        values["exploration_steps"] = 0
    values.update(overrides)
    cfg = ExperimentConfig(**values)
    return apply_scale(cfg, scale).validate()


def apply_scale(cfg: ExperimentConfig, scale: float) -> ExperimentConfig:
    if scale <= 0:
        raise ConfigError("scale must be positive")
    if scale == 1.0:
        return cfg
    return replace(cfg, episodes=max(1, int(round(cfg.episodes * scale))) if cfg.episodes else 0)


def _coerce(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if text.lower() == "none":
            return None
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def _set_fields(obj, items: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
        changes[key] = _coerce(raw, getattr(obj, key), prefix + key)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    cfg = base or ExperimentConfig()
    if "preset" in pairs:
        cfg = preset(pairs.pop("preset"), method=pairs.get("method"))
    nested: dict[str, dict[str, str]] = {"env": {}, "train": {}, "icm": {}}
    top = {}
    for key, value in pairs.items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in nested:
                raise ConfigError(f"unknown config section {head!r}")
            nested[head][rest] = value
        else:
            top[key] = value
    cfg = _set_fields(cfg, top, "")
    cfg = replace(
        cfg,
        env=_set_fields(cfg.env, nested["env"], "env."),
        train=_set_fields(cfg.train, nested["train"], "train."),
        icm=_set_fields(cfg.icm, nested["icm"], "icm."),
    )
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name} = {getattr(value, g.name)}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory: str | Path, team: MADDPG, icm, env_config: EnvConfig, method: str) -> Path:
    """Directory layout: manifest.json, agent_<i>/{actor,critic,target_actor,target_critic}.net,
    agent_<i>/icm/{encoder,forward,inverse}.net."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "method": method,
        "n_agents": team.n_agents,
        "obs_dim": team.learners[0].obs_dim,
        "roles": [lr.role for lr in team.learners],
        "train": dataclasses.asdict(team.config),
        "env": dataclasses.asdict(env_config),
        "icm": dataclasses.asdict(icm[0].config) if icm else None,
        "files": [],
    }
    for i, lr in enumerate(team.learners):
        sub = d / f"agent_{i}"
        sub.mkdir(exist_ok=True)
        for name, net in lr.networks().items():
            save_network(net, sub / f"{name}.net")
            manifest["files"].append(f"agent_{i}/{name}.net")
        if icm:
            (sub / "icm").mkdir(exist_ok=True)
            for name, net in icm[i].networks().items():
                save_network(net, sub / "icm" / f"{name}.net")
                manifest["files"].append(f"agent_{i}/icm/{name}.net")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


@dataclass
class LoadedModel:
    method: str
    env_config: EnvConfig
    team: MADDPG
    icm: list | None


def load_checkpoint(directory: str | Path) -> LoadedModel:
    d = Path(directory)
    if (d / "checkpoint" / "manifest.json").exists():
        d = d / "checkpoint"
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest in {d}") from exc
    env_config = EnvConfig(**manifest["env"])
    train_config = TrainConfig(**manifest["train"])
    n, obs_dim = manifest["n_agents"], manifest["obs_dim"]
    if env_config.n_agents != n or env_config.obs_dim != obs_dim:
        raise CheckpointError("manifest agent count / observation size disagree with its env config")
    team = MADDPG(n, obs_dim, train_config, 0, manifest["roles"])
    icm = None
    if manifest.get("icm"):
        icm = [CuriosityModule(obs_dim, IcmConfig(**manifest["icm"]), 0) for _ in range(n)]
    for i, lr in enumerate(team.learners):
        for name, net in lr.networks().items():
            _load_into(net, d / f"agent_{i}" / f"{name}.net")
        if icm:
            for name, net in icm[i].networks().items():
                _load_into(net, d / f"agent_{i}" / "icm" / f"{name}.net")
    return LoadedModel(manifest["method"], env_config, team, icm)


def _load_into(net, path: Path) -> None:
    loaded = load_network(path)
    if loaded.sizes != net.sizes or [l.activation for l in loaded.layers] != [l.activation for l in net.layers]:
        raise CheckpointError(f"{path}: architecture {loaded.sizes} does not match expected {net.sizes}")
    for dst, src in zip(net.params(), loaded.params()):
        dst[...] = src


# -- training ----------------------------------------------------------------

@dataclass
class MetricsRecord:
    episode: int
    agent_index: int
    role: str
    ext_reward: float
    intr_reward: float
    ep_seconds: float
    total_seconds: float

    def row(self) -> list[str]:
        return [str(self.episode), str(self.agent_index), self.role, repr(self.ext_reward),
                repr(self.intr_reward), f"{self.ep_seconds:.6f}", f"{self.total_seconds:.6f}"]


@dataclass
class TrainResult:
    config: ExperimentConfig
    metrics: list
    checkpoint: Path | None
    team: MADDPG | None = None
    icm: list | None = None
    goexplore: GoExplore | None = None
    seconds: float = 0.0
    episode_stats: list = field(default_factory=list)


def _streams(seed: int):
    team_ss, icm_ss, train_ss, eval_ss, test_ss = np.random.SeedSequence(seed).spawn(5)
    return (int(team_ss.generate_state(1)[0]), np.random.default_rng(icm_ss),
            np.random.default_rng(train_ss), np.random.default_rng(eval_ss), test_ss)


def play(env: ParticleWorld, team: MADDPG, icm, episodes: int, rng: np.random.Generator,
         steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free, learning-free episodes; returns per-episode (external, intrinsic) sums."""
    ext, intr = [], []
    for _ in range(episodes):
        st = run_episode(env, team, rng, icm=icm, noise_scale=0.0, learn=False, store=False, steps=steps)
        ext.append(st.external)
        intr.append(st.intrinsic)
    n = team.n_agents
    return np.array(ext).reshape(-1, n), np.array(intr).reshape(-1, n)


def train(cfg: ExperimentConfig, write: bool = True) -> TrainResult:
    cfg.validate()
    tune_allocator()
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(cfg))
    env = ParticleWorld(replace(cfg.env, episode_length=cfg.steps_per_episode))
    team_seed, icm_rng, rng, eval_rng, _ = _streams(cfg.seed)
    team = MADDPG(env.n_agents, env.obs_dim, cfg.train, team_seed, env.roles())
    icm = [CuriosityModule(env.obs_dim, cfg.icm, icm_rng) for _ in range(env.n_agents)] if cfg.use_icm else None
    ge = GoExplore(cfg.exploration_steps, cfg.cell_resolution, cfg.go_mode) if cfg.method == "i-go-explore" else None

    metrics: list[MetricsRecord] = []
    writer_fp = open(out / "metrics.csv", "w", newline="") if write else None
    writer = csv.writer(writer_fp, lineterminator="\n") if writer_fp else None
    if writer:
        writer.writerow(METRICS_HEADER)
    total = 0.0
    window: list[float] = []
    result = TrainResult(cfg, metrics, None, team, icm, ge)
    try:
        for ep in range(1, cfg.episodes + 1):
            noise = cfg.train.noise_scale(ep - 1, cfg.episodes)
            try:
                stats = run_episode(env, team, rng, icm=icm, goexplore=ge, noise_scale=noise)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"episode {ep}: {exc}") from exc
            result.episode_stats.append(stats)
            total += stats.seconds
            window.append(stats.seconds)
            if ep % cfg.eval_period == 0:
                ext, intr = play(env, team, icm, cfg.eval_episodes, eval_rng)
                ep_sec = float(np.mean(window)) if cfg.record_wall_time else 0.0
                tot_sec = total if cfg.record_wall_time else 0.0
                for i, role in enumerate(env.roles()):
                    rec = MetricsRecord(ep, i, role, float(ext[:, i].mean()), float(intr[:, i].mean()),
                                        ep_sec, tot_sec)
                    metrics.append(rec)
                    if writer:
                        writer.writerow(rec.row())
                writer_fp and writer_fp.flush()
                window = []
            if write and ge is not None and cfg.archive_dump_every and ep % cfg.archive_dump_every == 0:
                write_archive(ge, out / "archive.jsonl")
    finally:
        if writer_fp:
            writer_fp.close()
    result.seconds = total
    if write and cfg.episodes > 0:
        result.checkpoint = save_checkpoint(out / "checkpoint", team, icm, env.config, cfg.method)
        if ge is not None:
            write_archive(ge, out / "archive.jsonl")
        (out / "run.json").write_text(json.dumps({
            "method": cfg.method, "seed": cfg.seed, "episodes": cfg.episodes,
            "train_seconds": total, "updates": team.updates, "target_syncs": team.target_syncs,
            "buffer_size": len(team.buffer), "archive_cells": len(ge.archive) if ge else None,
        }, indent=2))
    return result


def write_archive(ge: GoExplore, path: Path) -> None:
    with open(path, "w") as fp:
        dump_archive(ge.archive, fp)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fp:
        reader = csv.DictReader(fp)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return list(reader)


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    roles: dict  # role -> mean per-episode external reward (predators averaged "each")
    per_agent: list
    episodes: int
    steps: int
    seconds: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def role_averages(ext: np.ndarray, roles: list[str]) -> dict:
    out = {}
    for role in sorted(set(roles)):
        cols = [i for i, r in enumerate(roles) if r == role]
        out[role] = float(ext[:, cols].mean()) if len(ext) else 0.0
    return out


def evaluate(checkpoint: str | Path | LoadedModel, episodes: int = 100, steps: int = 100, seed: int = 12345,
             method: str | None = None) -> EvalReport:
    """Test-run a trained model without noise or learning; reports external rewards only."""
    if episodes < 1:
        raise ConfigError("evaluation needs at least one episode")
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    model = checkpoint if isinstance(checkpoint, LoadedModel) else load_checkpoint(checkpoint)
    env = ParticleWorld(replace(model.env_config, episode_length=steps))
    # test episodes draw from their own stream, disjoint from every training stream
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57]))
    t0 = time.perf_counter()
    ext, _ = play(env, model.team, None, episodes, rng, steps=steps)
    roles = env.roles()
    return EvalReport(method or model.method, role_averages(ext, roles),
                      [float(v) for v in ext.mean(axis=0)], episodes, steps, time.perf_counter() - t0)


@dataclass
class Comparison:
    table: str
    flags: dict  # role -> winning method label or "tie"


def compare(a: EvalReport, b: EvalReport, label_a: str | None = None, label_b: str | None = None) -> Comparison:
    if set(a.roles) != set(b.roles):
        raise ValueError(f"role sets differ: {sorted(a.roles)} vs {sorted(b.roles)}")
    la, lb = label_a or a.method, label_b or b.method
    if la == lb:
        la, lb = la + " (A)", lb + " (B)"
    flags = {}
    rows = [f"{'agent':<12}{la:>22}{lb:>22}  higher"]
    for role in sorted(a.roles):
        va, vb = a.roles[role], b.roles[role]
        flags[role] = la if va > vb else lb if vb > va else "tie"
        name = "predator (each)" if role == "predator" else role
        rows.append(f"{name:<12}{va:>22.2f}{vb:>22.2f}  {flags[role]}")
    return Comparison("\n".join(rows), flags)


# -- traces --------------------------------------------------------------------

def export_traces(checkpoint: str | Path | LoadedModel, episodes: int, out_dir: str | Path,
                  steps: int | None = None, seed: int = 2024) -> list[Path]:
    """One CSV per episode; each row is an entity's state before the step plus the action taken there."""
    model = checkpoint if isinstance(checkpoint, LoadedModel) else load_checkpoint(checkpoint)
    steps = model.env_config.episode_length if steps is None else steps
    env = ParticleWorld(replace(model.env_config, episode_length=steps))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7ACE]))
    paths = []
    for ep in range(episodes):
        state = env.reset(int(rng.integers(0, 2**63 - 1)))
        path = out / f"trace_ep{ep:04d}.csv"
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for t in range(steps):
                obs = env.observe_all(state)
                actions = model.team.act_all(obs, 0.0, rng)
                for e in range(state.n_entities):
                    kind = penv.KIND_NAMES[int(state.kinds[e])]
                    acts = [repr(float(v)) for v in actions[e]] if e < env.n_agents else [""] * 5
                    w.writerow([ep, t, e, kind, *(repr(float(v)) for v in state.positions[e]),
                                *(repr(float(v)) for v in state.velocities[e]), *acts])
                state, _, _ = env.step(state, actions)
        paths.append(path)
    return paths


def read_trace(path: str | Path) -> list[dict]:
    with open(path, newline="") as fp:
        return list(csv.DictReader(fp))


def replay_trace(path: str | Path, env_config: EnvConfig) -> float:
    """Re-simulate a trace from its first state and logged actions; returns the max position error."""
    rows = read_trace(path)
    by_step: dict[int, list[dict]] = {}
    for r in rows:
        by_step.setdefault(int(r["step"]), []).append(r)
    steps = sorted(by_step)
    if not steps:
        return 0.0
    base = penv.reset(env_config, 0)

    def positions(group):
        return np.array([[float(r["x"]), float(r["y"])] for r in group])

    first = by_step[steps[0]]
    state = replace(base, positions=positions(first),
                    velocities=np.array([[float(r["vx"]), float(r["vy"])] for r in first]))
    world = ParticleWorld(env_config)
    worst = 0.0
    for t in steps[:-1]:
        acts = np.array([[float(r[f"a{k}"]) for k in range(5)] for r in by_step[t] if r["a0"] != ""])
        state, _, _ = world.step(state, acts)
        worst = max(worst, float(np.abs(state.positions - positions(by_step[t + 1])).max()))
    return worst


def iter_archive(path: str | Path) -> Iterable[dict]:
    with open(path) as fp:
        for line in fp:
            if line.strip():
                yield json.loads(line)
