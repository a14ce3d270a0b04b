"""Command line entry point.

    marl-curiosity train --config FILE --seed N --out DIR [--scale F]
    marl-curiosity eval --model DIR --episodes N --steps N --seed N [--report FILE]
    marl-curiosity compare A.json B.json
    marl-curiosity export-traces --model DIR --episodes N [--out DIR]
    marl-curiosity dump-archive --run DIR [--records]

``--config`` accepts a config file or a preset name (exp1, exp2, exp3-short,
exp3-long). Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .harness import ConfigError, EvalReport
from .nn import CheckpointError, TrainingDivergence

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marl-curiosity")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True, help="config file or preset name")
    t.add_argument("--method", choices=harness.METHODS, help="override the config's method")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--scale", type=float, default=1.0, help="multiply the episode count")
    t.add_argument("--archive-every", type=int, default=None, help="dump the archive every N episodes")

    e = sub.add_parser("eval", help="test a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--seed", type=int, default=12345)
    e.add_argument("--report", help="write the JSON report here as well")

    c = sub.add_parser("compare", help="compare two eval reports")
    c.add_argument("a")
    c.add_argument("b")

    x = sub.add_parser("export-traces", help="write per-episode trajectory CSVs")
    x.add_argument("--model", required=True)
    x.add_argument("--episodes", type=int, default=1)
    x.add_argument("--steps", type=int, default=None)
    x.add_argument("--seed", type=int, default=2024)
    x.add_argument("--out", default=None, help="defaults to <model>/traces")

    d = sub.add_parser("dump-archive", help="summarize a run's Go-Explore archive")
    d.add_argument("--run", required=True)
    d.add_argument("--records", action="store_true", help="also print every record")
    return p


def _load_train_config(args) -> harness.ExperimentConfig:
    if args.config in harness.PRESETS:
        cfg = harness.preset(args.config, method=args.method)
    else:
        cfg = harness.load_config(args.config)
        if args.method and args.method != cfg.method:
            cfg = replace(cfg, method=args.method,
                          exploration_steps=0 if args.method == "icm" else cfg.exploration_steps)
    cfg = harness.apply_scale(cfg, args.scale)
    changes = {"out_dir": args.out}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.archive_every is not None:
        changes["archive_dump_every"] = args.archive_every
    return replace(cfg, **changes).validate()


def _cmd_train(args) -> int:
    cfg = _load_train_config(args)
    result = harness.train(cfg)
    print(f"trained {cfg.method} for {cfg.episodes} episodes in {result.seconds:.1f}s -> {cfg.out_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = harness.evaluate(args.model, args.episodes, args.steps, args.seed)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return EXIT_OK


def _cmd_compare(args) -> int:
    a = EvalReport.from_json(Path(args.a).read_text())
    b = EvalReport.from_json(Path(args.b).read_text())
    cmp = harness.compare(a, b)
    print(cmp.table)
    return EXIT_OK


def _cmd_export(args) -> int:
    out = args.out or str(Path(args.model) / "traces")
    paths = harness.export_traces(args.model, args.episodes, out, steps=args.steps, seed=args.seed)
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_dump_archive(args) -> int:
    path = Path(args.run) / "archive.jsonl"
    records = list(harness.iter_archive(path))
    if args.records:
        for r in records:
            print(r)
    if records:
        lens = np.array([r["trajectory_len"] for r in records])
        visits = np.array([r["visit_count"] for r in records])
        print(f"cells={len(records)} trajectory_len mean={lens.mean():.2f} max={lens.max()} "
              f"visits mean={visits.mean():.2f} max={visits.max()}")
    else:
        print("cells=0")
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "export-traces": _cmd_export,
    "dump-archive": _cmd_dump_archive,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
