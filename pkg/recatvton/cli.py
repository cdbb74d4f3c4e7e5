"""Command-line interface.

Subcommands: gen-data, train, sample, eval, sweep, complexity, ablation,
robustness. Every subcommand accepts --config, --seed, --out and --threads.
Exit codes: 0 ok, 2 usage, 3 configuration, 4 I/O, 5 shape, 6 file format,
1 anything else. RECAT_LOG (error, info, debug) sets the log level.
"""

import argparse
import logging
import os
from pathlib import Path
import struct
import sys
from typing import List, Optional
import pandas as pd
from .checkpoint import load_checkpoint
from .config import load_config, RunConfig, save_config
from .constants import SWEEP_OMEGAS
from .denoiser import NetworkDenoiser, TinyUNet
from .errors import FormatError, InvalidConfig, ShapeMismatch
from .evalmetrics import (
    evaluate,
    evaluate_groups,
    fid_range,
    GROUPINGS,
    MODES,
    plot_sweep,
    reports_to_frame,
    sweep_guidance
)
from .experiments import (
    best_stage_counts,
    complexity_report,
    dataset_for,
    robustness_summary,
    run_ablation,
    run_guidance_robustness,
    train_model
)
from .images import save_tryon_grid
from .run_directory import latest_checkpoint
from .toydata import DatasetSplit, load_dataset, save_dataset
from .tryon import TryOnSampler

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
DATASET_FILE = "dataset.rcds"
SAMPLES_FILE = "samples.lgrd"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_SHAPE = 5
EXIT_FORMAT = 6


# ----------------------------------------------------------------------
# Shared helpers

def _config(args) -> RunConfig:
    """The --config file, else the configuration echoed in OUT, else the defaults."""
    echoed = Path(args.out).expanduser() / CONFIG_FILE
    if args.config:
        config = load_config(args.config)
    elif echoed.is_file():
        config = load_config(echoed)
    else:
        config = RunConfig({})
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _dataset(args, config: RunConfig) -> DatasetSplit:
    if args.data:
        return load_dataset(args.data)
    path = Path(args.out) / DATASET_FILE
    if path.is_file():
        return load_dataset(path)
    logger.info(f"No dataset at '{path}', generating one from the configuration.")
    return dataset_for(config)


def _denoiser(args) -> NetworkDenoiser:
    path = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(args.out)
    if path is None:
        raise FileNotFoundError(f"No checkpoint found in '{args.out}'.")
    checkpoint = load_checkpoint(path)
    net = TinyUNet(RunConfig(checkpoint.config).net_config())
    return NetworkDenoiser(net, checkpoint.params)


def _out(args) -> Path:
    out = Path(args.out).expanduser()
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# Subcommands

def gen_data(args) -> int:
    config = _config(args)
    out = _out(args)
    save_dataset(dataset_for(config), out / DATASET_FILE)
    save_config(config, out / CONFIG_FILE)
    return EXIT_OK


def train(args) -> int:
    config = _config(args)
    out = _out(args)
    train_model(config, _dataset(args, config), run_dir=out, resume=args.resume)
    return EXIT_OK


def sample(args) -> int:
    config = _config(args)
    out = _out(args)
    save_config(config, out / CONFIG_FILE)
    split = _dataset(args, config)
    scenes = (split.test_paired if args.mode == "paired" else split.test_unpaired)[:args.count]
    sampler = TryOnSampler(
        _denoiser(args), config.sampler_config(), config.schedule(),
        threads=args.threads, chunk=config["eval.chunk"],
    )
    outputs = sampler.generate(scenes)
    records = b"".join(grid.to_bytes() for grid in outputs)
    (out / SAMPLES_FILE).write_bytes(struct.pack("<Q", len(outputs)) + records)
    if scenes:
        save_tryon_grid(scenes, outputs, out / "samples.png")
    return EXIT_OK


def evaluate_command(args) -> int:
    config = _config(args)
    out = _out(args)
    save_config(config, out / CONFIG_FILE)
    split = _dataset(args, config)
    sampler = TryOnSampler(
        _denoiser(args), config.sampler_config(), config.schedule(),
        threads=args.threads, chunk=config["eval.chunk"],
    )
    modes = MODES if args.mode == "both" else (args.mode,)
    reports = [evaluate(sampler, split, config.embedding_spec(), mode) for mode in modes]
    df = reports_to_frame(reports)
    df.to_csv(out / "metrics.csv", index=False)
    print(df.to_string(index=False))
    if args.group_by:
        groups = pd.concat([
            evaluate_groups(sampler, split, config.embedding_spec(), mode, args.group_by)
            for mode in modes
        ], ignore_index=True)
        groups.to_csv(out / "metrics_by_group.csv", index=False)
        print(groups.to_string(index=False))
    return EXIT_OK


def sweep(args) -> int:
    config = _config(args)
    out = _out(args)
    save_config(config, out / CONFIG_FILE)
    split = _dataset(args, config)
    denoiser = _denoiser(args)
    modes = MODES if args.mode == "both" else (args.mode,)
    df = sweep_guidance(
        denoiser, split, config.embedding_spec(), config.schedule(), config.sampler_config(),
        omegas=args.omegas, variants=args.variants, modes=modes,
        threads=args.threads, chunk=config["eval.chunk"],
    )
    df.to_csv(out / "sweep.csv", index=False)
    plot_sweep(df, out / "sweep.png")
    print(df.to_string(index=False))
    print(fid_range(df).to_string())
    return EXIT_OK


def complexity(args) -> int:
    config = _config(args)
    out = _out(args)
    save_config(config, out / CONFIG_FILE)
    df = complexity_report(config)
    df.to_csv(out / "complexity.csv", index=False)
    print(df.to_string(index=False))
    return EXIT_OK


def ablation(args) -> int:
    config = _config(args)
    out = _out(args)
    save_config(config, out / CONFIG_FILE)
    modes = MODES if args.mode == "both" else (args.mode,)
    df = run_ablation(config, seeds=args.seeds, modes=modes, threads=args.threads)
    df.to_csv(out / "ablation.csv", index=False)
    print(df.to_string(index=False))
    for mode in modes:
        print(f"Best stage per seed ({mode}):")
        print(best_stage_counts(df, mode).to_string())
    return EXIT_OK


def robustness(args) -> int:
    config = _config(args)
    out = _out(args)
    save_config(config, out / CONFIG_FILE)
    modes = MODES if args.mode == "both" else (args.mode,)
    df = run_guidance_robustness(
        config, seeds=args.seeds, omegas=args.omegas, modes=modes, threads=args.threads
    )
    df.to_csv(out / "robustness.csv", index=False)
    print(robustness_summary(df).to_string())
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides train, sampler and data seeds")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="sampling threads")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help=f"dataset file (default OUT/{DATASET_FILE})")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", help="checkpoint file (default: latest in OUT)")

    mode = argparse.ArgumentParser(add_help=False)
    mode.add_argument("--mode", choices=(*MODES, "both"), default="paired")

    both_modes = argparse.ArgumentParser(add_help=False)
    both_modes.add_argument("--mode", choices=(*MODES, "both"), default="both")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--omegas", type=float, nargs="+", default=list(SWEEP_OMEGAS))

    seeds = argparse.ArgumentParser(add_help=False)
    seeds.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    parser = argparse.ArgumentParser(prog="recatvton", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the toy dataset").set_defaults(
        func=gen_data
    )
    p = sub.add_parser("train", parents=[common, data], help="train a denoiser")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=train)
    p = sub.add_parser("sample", parents=[common, data, model], help="sample try-on results")
    p.add_argument("--mode", choices=MODES, default="paired")
    p.add_argument("--count", type=int, default=8, help="number of test scenes")
    p.set_defaults(func=sample)
    p = sub.add_parser("eval", parents=[common, data, model, mode], help="score a checkpoint")
    p.add_argument("--group-by", choices=GROUPINGS,
                   help="also score each garment family or garment separately")
    p.set_defaults(func=evaluate_command)
    p = sub.add_parser(
        "sweep", parents=[common, data, model, mode, grid], help="guidance-scale sweep"
    )
    p.add_argument("--variants", nargs="+", choices=("catvton", "recatvton"),
                   default=["catvton", "recatvton"])
    p.set_defaults(func=sweep)
    sub.add_parser(
        "complexity", parents=[common], help="parameters, FLOPs and latency"
    ).set_defaults(func=complexity)
    sub.add_parser(
        "ablation", parents=[common, both_modes, seeds],
        help="train and score the ablation stages",
    ).set_defaults(func=ablation)
    sub.add_parser(
        "robustness", parents=[common, both_modes, grid, seeds],
        help="omega sensitivity per variant",
    ).set_defaults(func=robustness)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Runs one subcommand and returns its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("recatvton: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except InvalidConfig as e:
        code = EXIT_CONFIG
        message = e
    except OSError as e:
        code = EXIT_IO
        message = e
    except ShapeMismatch as e:
        code = EXIT_SHAPE
        message = e
    except FormatError as e:
        code = EXIT_FORMAT
        message = e
    except Exception as e:
        code = EXIT_OTHER
        message = f"{type(e).__name__}: {e}"
    print(f"recatvton: error: {message}", file=sys.stderr)
    return code


def main():
    level = LOG_LEVELS.get(os.getenv("RECAT_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s - %(name)s - %(message)s")
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
