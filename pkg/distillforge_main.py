#!/usr/bin/env python3
"""
DistillForge Command Line
Orchestrates expert generation, distillation, evaluation, the matching-range
ablation, buffer inspection and grid rendering
"""

import argparse
import csv
import logging
import statistics
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

from core.analytics.metrics_log import export_report_json
from core.config import ConfigManager, RunConfig, parse_range, stage_definitions
from core.datakit.dataset import Dataset, make_toy_split, normalize
from core.datakit.export import export_distilled, import_distilled
from core.datakit.grid import export_image_grid, grid_delta
from core.diffnet import DTYPES
from core.distill import DistillConfig, prepare_synthetic, run_distillation
from core.errors import ConfigError, DistillForgeError
from core.evalharness import (
    audit_report_lines,
    baseline_random_subset,
    evaluate,
    label_consistency_check,
)
from core.parallel import configure_torch_threads, fan_out, thread_budget
from core.trainer import spawn_seeds
from core.trajstore.buffer import buffer_header, read_buffer, write_buffer
from core.trajstore.pool import ExpertPool, expert_filename
from core.trajstore.schedule import stage_schedules
from core.trajstore.trajectory import distance_profile, train_expert

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG = "effective_config.cfg"
ABLATION_COLUMNS = ['range', 'T_minus', 'T_init', 'T_plus', 'mean', 'std', 'image_delta']


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value lines)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--seed", type=int, help="distillation seed")
    common.add_argument("--label-mode", choices=("hard", "soft"), help="hard labels or trainable soft labels")
    common.add_argument("--range", dest="matching_range", metavar="T-:Tinit:T+", help="matching range")
    common.add_argument("--experts", type=int, help="number of expert trajectories")
    common.add_argument("--preset", help="hyper-parameter preset from config/presets.yaml")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings only")

    parser = argparse.ArgumentParser(prog="distillforge", description="Trajectory-matching dataset distillation")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    commands.add_parser("gen-experts", parents=[common], help="train expert trajectories")
    commands.add_parser("distill", parents=[common], help="distill a synthetic dataset")
    for name, text in (("eval", "evaluate a distilled dataset"), ("render", "render the distilled image grid")):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("--distilled", help="distilled dataset directory (default <out>/distilled)")
    commands.add_parser("ablate", parents=[common], help="early/medium/late matching-range comparison")
    inspect = commands.add_parser("inspect-buffer", parents=[common], help="print a trajectory buffer summary")
    inspect.add_argument("buffer", help="path to a .trjb file")
    return parser


def _setup_logging(args: argparse.Namespace):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    logging.getLogger().setLevel(level)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """File (or DISTILLFORGE_CONFIG) plus CLI flags, echoed to <out>/effective_config.cfg"""
    config = ConfigManager.load_from_file(args.config) if args.config else ConfigManager.load_from_env()
    overrides = {
        "seed": args.seed,
        "label_mode": args.label_mode,
        "experts": args.experts,
        "preset": args.preset,
    }
    if args.matching_range:
        overrides.update(parse_range(args.matching_range))
    config = ConfigManager.apply_overrides(config, **overrides)
    ConfigManager.save_to_file(config, Path(args.out) / EFFECTIVE_CONFIG)
    return config


def real_data(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """Normalized toy train/test split at the run precision; test uses train statistics"""
    train, test = make_toy_split(config.toy_spec())
    train = normalize(train)
    test = normalize(test, train.norm_mean, train.norm_std)
    dtype = DTYPES[config.precision]
    return train.astype(dtype), test.astype(dtype)


def expert_dir(config: RunConfig, out: Path) -> Path:
    return Path(config.expert_dir) if config.expert_dir else out / "experts"


def cmd_gen_experts(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    train, _ = real_data(config)
    spec = config.network_spec()
    target = expert_dir(config, out)
    target.mkdir(parents=True, exist_ok=True)

    seeds = spawn_seeds(config.seed, config.experts)

    def one_expert(k: int) -> Path:
        traj = train_expert(spec, train, config.expert_epochs, seed=seeds[k],
                            lr=config.expert_lr, momentum=config.expert_momentum, batch_size=config.expert_batch)
        return write_buffer(traj, target / expert_filename(k))

    paths = fan_out(one_expert, range(config.experts), thread_budget())
    logger.info(f"✅ {len(paths)} expert trajectories written to {target}")
    return 0


def _distill_config(config: RunConfig, out: Path) -> DistillConfig:
    return config.distill_config(expert_dir=str(expert_dir(config, out)))


def cmd_distill(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    train, test = real_data(config)
    spec = config.network_spec()
    dconf = _distill_config(config, out)
    pool = ExpertPool.from_directory(dconf.expert_dir, dconf.dtype, count=config.experts)

    evaluator = None
    if config.eval_every > 0:
        quick = config.eval_config(seeds=1, workers=1)
        evaluator = lambda syn: evaluate(syn, test, quick).mean

    initial = prepare_synthetic(dconf, train, spec, pool)
    syn, log = run_distillation(dconf, train, spec, pool, checkpoint_dir=out / "checkpoints",
                                evaluator=evaluator, syn=initial.clone())

    export_distilled(out / "distilled", syn)
    log.to_csv(out / "metrics.csv")
    export_image_grid(syn, out / "grid.png", initial=initial)
    report = log.oscillation_report()
    export_report_json(report, out / "oscillation_report.json")
    logger.info(f"✅ Distillation finished: loss {report.first_mean:.5f} -> {report.last_mean:.5f} "
                f"({report.relative_improvement:+.1%})")
    return 0


def _distilled_dir(args: argparse.Namespace, out: Path) -> Path:
    path = Path(args.distilled) if getattr(args, "distilled", None) else out / "distilled"
    if not path.is_dir():
        raise FileNotFoundError(f"Distilled dataset not found: {path}")
    return path


def cmd_eval(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    train, test = real_data(config)
    distilled = _distilled_dir(args, out)
    syn = import_distilled(distilled)

    report = evaluate(syn.images, test, config.eval_config(), ipc=syn.ipc)
    report.to_csv(out / "eval_report.csv")
    baseline = baseline_random_subset(train, test, syn.ipc, config.eval_config(seeds=config.baseline_seeds))
    baseline.to_csv(out / "baseline_report.csv")

    lines = audit_report_lines(label_consistency_check(distilled))
    (out / "label_audit.txt").write_text("\n".join(lines) + "\n")
    logger.info(f"✅ Distilled {report.mean:.4f} ± {report.std:.4f} vs random subset "
                f"{baseline.mean:.4f} ± {baseline.std:.4f}; {lines[0]}")
    return 0


def cmd_ablate(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    train, test = real_data(config)
    spec = config.network_spec()
    base = _distill_config(config, out)
    pool = ExpertPool.from_directory(base.expert_dir, base.dtype, count=config.experts)
    stages, reference = stage_definitions()
    schedules = stage_schedules(stages, pool.min_epochs, config.M, config.interval, reference)
    eval_config = config.eval_config()
    distill_seeds = spawn_seeds(config.seed, config.ablate_seeds)

    rows = []
    for name, schedule in schedules:
        means, deltas = [], []
        for k in range(config.ablate_seeds):
            dconf = replace(base, schedule=schedule, seed=distill_seeds[k])
            initial = prepare_synthetic(dconf, train, spec, pool)
            syn, _ = run_distillation(dconf, train, spec, pool, syn=initial.clone())
            means.append(evaluate(syn, test, eval_config).mean)
            deltas.append(grid_delta(initial, syn))
            if k == 0:
                export_image_grid(syn, out / "ablation" / f"{name}_grid.png", initial=initial)
        rows.append({
            'range': name,
            'T_minus': schedule.t_minus,
            'T_init': schedule.t_init,
            'T_plus': schedule.t_plus,
            'mean': repr(statistics.fmean(means)),
            'std': repr(statistics.pstdev(means)),
            'image_delta': repr(statistics.fmean(deltas)),
        })
        logger.info(f"Stage {name} ({schedule.describe()}): accuracy {statistics.fmean(means):.4f}")

    with open(out / "ablation.csv", 'w', newline='', encoding='utf-8') as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"✅ Ablation written to {out / 'ablation.csv'}")
    return 0


def cmd_inspect_buffer(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    traj = read_buffer(args.buffer)
    header = buffer_header(args.buffer, traj)
    for key, value in header.items():
        print(f"{key}: {value}")
    print(f"n: {traj.epochs}")
    print(f"P: {traj.param_count}")
    M = min(config.M, traj.epochs)
    print(f"distance profile (M={M}):")
    for t, distance in enumerate(distance_profile(traj, M)):
        print(f"  t={t:3d}  {distance:.6g}")
    return 0


def cmd_render(config: RunConfig, out: Path, args: argparse.Namespace) -> int:
    syn = import_distilled(_distilled_dir(args, out))
    layout = syn.layout or config.toy_spec().layout
    export_image_grid(syn, out / "grid.png", layout=layout)
    return 0


COMMANDS = {
    "gen-experts": cmd_gen_experts,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-buffer": cmd_inspect_buffer,
    "render": cmd_render,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one subcommand and map failures to exit codes (1 runtime, 2 usage/config)"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    _setup_logging(args)
    configure_torch_threads()
    out = Path(args.out)
    try:
        config = load_run_config(args)
        logger.info(f"🚀 {args.command}: output in {out}")
        return COMMANDS[args.command](config, out, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except (DistillForgeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
