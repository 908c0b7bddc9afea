"""Command-line surface: generate, stats, validate, fit-tokenizer, eval.

Exit codes: 0 success, 1 violations found, 2 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .actions import fit_tokenizer, save_tokenizer
from .dataset import SchemaError, compute_stats, load_manifest, read_episode, validate_dataset
from .engine import EngineConfig, EngineError, eval_rerun, generate


def _cmd_generate(args) -> int:
    try:
        if args.config:
            config = EngineConfig.from_file(args.config)
        else:
            config = EngineConfig()
        if args.robot:
            config = EngineConfig.from_dict({**_config_dict(config), "robot": args.robot})
        if args.episodes is not None:
            config.episodes = args.episodes
        if args.seed is not None:
            config.base_seed = args.seed
        if args.workers is not None:
            config.workers = args.workers
        if args.out:
            config.out_dir = args.out
        if args.no_noise:
            config.noise = False
    except EngineError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        report = generate(config)
    except EngineError as e:
        print(f"generation aborted: {e}", file=sys.stderr)
        return 1
    setup_frac, rollout_frac = report.time_fractions()
    print(f"dataset: {config.out_dir}")
    print(f"successes: {report.successes}  discards: {report.discards}")
    print(f"wall time: {report.wall_time:.1f} s  ({report.episodes_per_hour():.0f} episodes/h)")
    print(f"time split: setup {setup_frac:.1%}, rollout {rollout_frac:.1%}")
    for reason, count in report.discard_reasons.most_common():
        print(f"  discard[{reason}]: {count}")
    return 0


def _config_dict(config: EngineConfig) -> dict:
    return {
        "robot": config.robot,
        "episodes": config.episodes,
        "base_seed": config.base_seed,
        "workers": config.workers,
        "out_dir": config.out_dir,
        "noise": config.noise,
    }


def _cmd_stats(args) -> int:
    try:
        rows = compute_stats(load_manifest(args.dataset))
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    header = f"{'task':<16}{'robot':<10}{'episodes':>10}{'frames':>12}{'avg len [s]':>13}{'total [h]':>11}"
    print(header)
    print("-" * len(header))
    total_frames = 0
    total_eps = 0
    for r in rows:
        total_frames += r.frames
        total_eps += r.episodes
        print(
            f"{r.task:<16}{r.robot:<10}{r.episodes:>10}{r.frames:>12}"
            f"{r.avg_length_s:>13.2f}{r.total_hours:>11.3f}"
        )
    print(f"{'total':<16}{'':<10}{total_eps:>10}{total_frames:>12}")
    return 0


def _cmd_validate(args) -> int:
    report = validate_dataset(args.dataset, recheck_fraction=args.recheck_fraction)
    print(f"episodes: {report.episodes}  steps: {report.steps}  re-verified: {report.rechecked}")
    if report.violations:
        print(f"violations ({len(report.violations)}):")
        for v in report.violations[:50]:
            print(f"  {v}")
        if len(report.violations) > 50:
            print(f"  ... and {len(report.violations) - 50} more")
        return 1
    print("no violations")
    return 0


def _cmd_fit_tokenizer(args) -> int:
    try:
        manifest = load_manifest(args.dataset)
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    streams = []
    for entry in manifest:
        record = read_episode(Path(args.dataset) / entry["file"])
        streams.extend(s.actions[args.representation] for s in record.steps)
    if not streams:
        print("error: dataset holds no steps", file=sys.stderr)
        return 1
    samples = np.asarray(streams, dtype=float)
    try:
        tok = fit_tokenizer(samples)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    save_tokenizer(tok, args.out)
    degenerate = int(tok.degenerate.sum())
    print(f"tokenizer: {samples.shape[1]} dims, {samples.shape[0]} samples, {degenerate} degenerate dims -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    metric = "at_end" if args.metric == "at-end" else args.metric
    try:
        rows = eval_rerun(args.dataset, metric=metric)
    except (EngineError, SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    header = f"{'task':<16}{'robot':<10}{'episodes':>10}{'rate':>8}{'95% CI':>18}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(
            f"{r.task:<16}{r.robot:<10}{r.episodes:>10}{r.rate:>8.3f}"
            f"{'[' + format(r.ci_low, '.3f') + ', ' + format(r.ci_high, '.3f') + ']':>18}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demoforge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a demonstration dataset")
    g.add_argument("--config", help="engine config JSON file")
    g.add_argument("--robot", choices=["franka_fr3", "rby1"])
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--out")
    g.add_argument("--no-noise", action="store_true", help="disable action noise (evaluation mode)")
    g.set_defaults(fn=_cmd_generate)

    s = sub.add_parser("stats", help="dataset statistics by task")
    s.add_argument("--dataset", required=True)
    s.set_defaults(fn=_cmd_stats)

    v = sub.add_parser("validate", help="schema and consistency validation")
    v.add_argument("--dataset", required=True)
    v.add_argument("--recheck-fraction", type=float, default=0.2)
    v.set_defaults(fn=_cmd_validate)

    f = sub.add_parser("fit-tokenizer", help="fit the quantile action tokenizer")
    f.add_argument("--dataset", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--representation", default="abs_joint",
                   choices=["abs_joint", "delta_joint", "ee_twist", "ee_abs_pose"])
    f.set_defaults(fn=_cmd_fit_tokenizer)

    e = sub.add_parser("eval", help="recompute success metrics with bootstrap CIs")
    e.add_argument("--dataset", required=True)
    e.add_argument("--metric", choices=["oracle", "at-end"], default="oracle")
    e.set_defaults(fn=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
