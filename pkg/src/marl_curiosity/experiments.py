"""Multi-seed desk-scale runs comparing ICM against I-Go-Explore.

    python -m marl_curiosity.experiments --seeds 0 1 2 3 4 --out runs/desk

Each (method, exploration length, seed) trains from scratch, then the final
model is tested without noise or learning. Results land in
``<out>/summary.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import median

from .harness import ExperimentConfig, evaluate, preset, train

log = logging.getLogger(__name__)

# (label, method, exploration steps)
VARIANTS = {
    "icm": ("icm", 0),
    "igx50": ("i-go-explore", 50),
    "igx10": ("i-go-explore", 10),
}


@dataclass
class DeskProtocol:
    episodes: int = 200
    steps: int = 100
    test_episodes: int = 100
    test_steps: int = 100
    eval_episodes: int = 2
    overrides: dict = field(default_factory=dict)

    def config(self, variant: str, seed: int, out_dir: Path) -> ExperimentConfig:
        method, explore = VARIANTS[variant]
        return replace(
            preset("exp1", method=method),
            episodes=self.episodes, steps_per_episode=self.steps, exploration_steps=explore,
            test_episodes=self.test_episodes, test_steps=self.test_steps,
            eval_episodes=self.eval_episodes, seed=seed, out_dir=str(out_dir), **self.overrides,
        ).validate()


def run_variant(protocol: DeskProtocol, variant: str, seed: int, out_root: Path, write: bool = True) -> dict:
    cfg = protocol.config(variant, seed, out_root / f"{variant}_seed{seed}")
    t0 = time.perf_counter()
    result = train(cfg, write=write)
    from .harness import LoadedModel

    model = LoadedModel(cfg.method, replace(cfg.env, episode_length=cfg.steps_per_episode),
                        result.team, result.icm)
    report = evaluate(model, cfg.test_episodes, cfg.test_steps, seed=10_000 + seed, method=variant)
    row = {"variant": variant, "seed": seed, "prey": report.roles["prey"],
           "predator": report.roles["predator"], "train_seconds": result.seconds,
           "wall_seconds": time.perf_counter() - t0}
    if write:
        (Path(cfg.out_dir) / "test_report.json").write_text(report.to_json())
    log.info("%s seed %d: prey %.2f predator %.2f (%.0fs)", variant, seed, row["prey"], row["predator"],
             row["wall_seconds"])
    return row


def summarize(rows: list[dict], seeds: list[int]) -> dict:
    by = {(r["variant"], r["seed"]): r for r in rows}
    out: dict = {"rows": rows}
    if all(("icm", s) in by and ("igx50", s) in by for s in seeds):
        wins = [s for s in seeds if by[("igx50", s)]["prey"] > by[("icm", s)]["prey"]]
        out["exp1"] = {"seeds": seeds, "igx50_prey_better": wins, "count": len(wins),
                       "icm_prey": [by[("icm", s)]["prey"] for s in seeds],
                       "igx50_prey": [by[("igx50", s)]["prey"] for s in seeds]}
    if all(("igx10", s) in by and ("igx50", s) in by for s in seeds):
        short = [by[("igx10", s)]["prey"] for s in seeds]
        long = [by[("igx50", s)]["prey"] for s in seeds]
        out["exp3"] = {"seeds": seeds, "igx10_prey": short, "igx50_prey": long,
                       "median_short": median(short), "median_long": median(long),
                       "short_ge_long": median(short) >= median(long)}
    return out


def run_all(seeds: list[int], variants: list[str], out_root: str | Path, protocol: DeskProtocol | None = None,
            resume: bool = True) -> dict:
    protocol = protocol or DeskProtocol()
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows_path = out_root / "rows.jsonl"
    done = {}
    if resume and rows_path.exists():
        for line in rows_path.read_text().splitlines():
            r = json.loads(line)
            done[(r["variant"], r["seed"])] = r
    rows = []
    for seed in seeds:
        for variant in variants:
            if (variant, seed) in done:
                rows.append(done[(variant, seed)])
                continue
            row = run_variant(protocol, variant, seed, out_root)
            rows.append(row)
            with open(rows_path, "a") as fp:
                fp.write(json.dumps(row) + "\n")
    summary = summarize(rows, seeds)
    (out_root / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m marl_curiosity.experiments")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--test-episodes", type=int, default=100)
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--fresh", action="store_true", help="ignore rows from earlier invocations")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    protocol = DeskProtocol(episodes=args.episodes, steps=args.steps, test_episodes=args.test_episodes)
    summary = run_all(args.seeds, args.variants, args.out, protocol, resume=not args.fresh)
    print(json.dumps({k: v for k, v in summary.items() if k != "rows"}, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
