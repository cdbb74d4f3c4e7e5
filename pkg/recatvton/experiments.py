"""Training entry point and the experiment harnesses built on it.

The ablation adds the method's components one at a time:

    catvton        CatVTON dropout and guidance, full-duo loss, no GT injection
    +improved_cfg  garment-free unconditional branch for dropout and guidance
    +outfit_only   DREAM loss on the person rows only
    +gt_injection  ground-truth garment rows during sampling

The robustness harness compares how strongly FID_g reacts to omega for the
first and the last of these configurations.
"""

import logging
from pathlib import Path
import time
from typing import Optional, Sequence, Tuple
from consistent_df import enforce_dtypes
import numpy as np
import pandas as pd
from .checkpoint import load_checkpoint
from .config import RunConfig, save_config
from .constants import ABLATION_COLUMNS, COMPLEXITY_COLUMNS, ROBUSTNESS_COLUMNS, SWEEP_OMEGAS
from .denoiser import count_params_flops, NetworkDenoiser, TinyUNet, TinyUNetParams
from .dreamtrain import AdamWState, Trainer
from .errors import InvalidConfig
from .evalmetrics import evaluate, MODES, sweep_guidance
from .run_directory import latest_checkpoint
from .toydata import DatasetSplit, gen_dataset
from .tryon import TryOnSampler

logger = logging.getLogger(__name__)

ABLATION_STAGES = ("catvton", "+improved_cfg", "+outfit_only", "+gt_injection")

_STAGE_OVERRIDES = {
    "catvton": {
        "train.variant": "catvton", "cfg.variant": "catvton",
        "train.loss": "full", "sampler.gt_injection": False,
    },
    "+improved_cfg": {
        "train.variant": "recatvton", "cfg.variant": "recatvton",
        "train.loss": "full", "sampler.gt_injection": False,
    },
    "+outfit_only": {
        "train.variant": "recatvton", "cfg.variant": "recatvton",
        "train.loss": "outfit_only", "sampler.gt_injection": False,
    },
    "+gt_injection": {
        "train.variant": "recatvton", "cfg.variant": "recatvton",
        "train.loss": "outfit_only", "sampler.gt_injection": True,
    },
}


def stage_config(config: RunConfig, stage: str) -> RunConfig:
    """Configuration of one ablation stage."""
    if stage not in _STAGE_OVERRIDES:
        raise ValueError(f"Unknown ablation stage '{stage}'.")
    return config.with_values(**_STAGE_OVERRIDES[stage])


def dataset_for(config: RunConfig) -> DatasetSplit:
    return gen_dataset(
        config["data.seed"], config["data.n_train"], config["data.n_test"], config.scene_params()
    )


def train_model(
    config: RunConfig,
    split: DatasetSplit,
    run_dir: Optional[str | Path] = None,
    resume: bool = False,
) -> Tuple[TinyUNet, TinyUNetParams]:
    """Trains a TinyUNet on the split's training scenes.

    With `resume`, training continues from the latest checkpoint in
    `run_dir`; the result equals an uninterrupted run of the same length.
    """
    net = TinyUNet(config.net_config())
    params = net.init_params(config["train.seed"])
    state, start = None, 0
    if resume:
        if run_dir is None:
            raise ValueError("Resuming needs a run directory.")
        path = latest_checkpoint(run_dir)
        if path is not None:
            checkpoint = load_checkpoint(path)
            params, start = checkpoint.params, checkpoint.step
            if checkpoint.m is not None and checkpoint.v is not None:
                state = AdamWState(checkpoint.m, checkpoint.v, checkpoint.optimizer_step)
            logger.info(f"Resuming from '{path}' at step {start}.")
    if run_dir is not None:
        save_config(config, Path(run_dir) / "config.json")
    trainer = Trainer(
        net,
        config.train_config(),
        config.schedule(),
        split.train,
        run_dir=run_dir,
        config=config.to_dict(),
        checkpoint_every=config["train.checkpoint_every"],
        log_every=config["train.log_every"],
        validation_scenes=split.test_paired,
    )
    params, _ = trainer.fit(params, state=state, start_step=start)
    return net, params


def run_ablation(
    config: RunConfig,
    seeds: Sequence[int] = (0, 1, 2),
    stages: Sequence[str] = ABLATION_STAGES,
    modes: Sequence[str] = MODES,
    threads: int = 1,
) -> pd.DataFrame:
    """Trains every stage per seed and scores it on each test mode.

    Omega is taken from `cfg.omega` (2.5 by default). SSIM is missing for
    unpaired rows.

    Returns:
        pd.DataFrame: One row per (stage, seed, mode), ABLATION_COLUMNS schema.
    """
    if not modes:
        raise InvalidConfig("Ablation needs at least one evaluation mode.")
    rows = []
    for seed in seeds:
        seeded = config.with_seed(seed)
        split = dataset_for(seeded)
        for stage in stages:
            staged = stage_config(seeded, stage)
            net, params = train_model(staged, split)
            sampler = TryOnSampler(
                NetworkDenoiser(net, params), staged.sampler_config(), staged.schedule(),
                threads=threads, chunk=staged["eval.chunk"],
            )
            for mode in modes:
                report = evaluate(sampler, split, staged.embedding_spec(), mode)
                rows.append({
                    "stage": stage, "seed": seed, "mode": mode, "omega": staged["cfg.omega"],
                    "ssim": report.to_dict()["ssim"], "fid_g": report.fid_g,
                    "kid_p": report.kid_p,
                })
                logger.info(
                    f"Ablation seed {seed}, stage {stage}, {mode}: fid_g={report.fid_g:.5f}."
                )
    df = pd.DataFrame(rows, columns=list(ABLATION_COLUMNS))
    return enforce_dtypes(df, ABLATION_COLUMNS)


def best_stage_counts(df: pd.DataFrame, mode: str = "paired") -> pd.Series:
    """How often each stage has the lowest FID_g of its seed in the given mode."""
    rows = df.loc[df["mode"] == mode]
    best = rows.loc[rows.groupby("seed")["fid_g"].idxmin(), "stage"]
    return best.value_counts()


def run_guidance_robustness(
    config: RunConfig,
    seeds: Sequence[int] = (0, 1, 2),
    omegas: Sequence[float] = SWEEP_OMEGAS,
    modes: Sequence[str] = MODES,
    threads: int = 1,
) -> pd.DataFrame:
    """FID_g over the omega grid for a CatVTON-style and a Re-CatVTON model per seed.

    Returns:
        pd.DataFrame: One row per (variant, seed, omega, mode), ROBUSTNESS_COLUMNS schema.
    """
    frames = []
    for seed in seeds:
        seeded = config.with_seed(seed)
        split = dataset_for(seeded)
        for variant, stage in (("catvton", "catvton"), ("recatvton", "+gt_injection")):
            staged = stage_config(seeded, stage)
            net, params = train_model(staged, split)
            df = sweep_guidance(
                NetworkDenoiser(net, params), split, staged.embedding_spec(), staged.schedule(),
                staged.sampler_config(), omegas=omegas, variants=[variant], modes=modes,
                threads=threads, chunk=staged["eval.chunk"],
            )
            df["seed"] = seed
            frames.append(df)
    df = pd.concat(frames, ignore_index=True)[list(ROBUSTNESS_COLUMNS)]
    return enforce_dtypes(df, ROBUSTNESS_COLUMNS)


def robustness_summary(df: pd.DataFrame) -> pd.Series:
    """Median over seeds of the per-seed FID_g range, per variant and mode."""
    ranges = df.groupby(["variant", "mode", "seed"])["fid_g"].agg(lambda s: s.max() - s.min())
    return ranges.groupby(level=["variant", "mode"]).median()


def complexity_report(config: RunConfig, warmup: int = 5, repeats: int = 30) -> pd.DataFrame:
    """Parameters, conv FLOPs and mean batch-1 forward latency of the configured TinyUNet.

    `params` and `flops` depend on the configuration only. `latency_ms` is
    wall-clock time on the current machine and load, so it differs between
    runs; compare it only within one session.
    """
    net = TinyUNet(config.net_config())
    params = net.init_params(config["train.seed"])
    spec = net.config.input_spec
    count, flops = count_params_flops(params, spec)
    x = np.zeros((1,) + spec.shape)
    t = np.zeros(1, dtype=int)
    for _ in range(warmup):
        net.forward(params, x, t)
    started = time.perf_counter()
    for _ in range(repeats):
        net.forward(params, x, t)
    latency_ms = 1000.0 * (time.perf_counter() - started) / max(repeats, 1)
    df = pd.DataFrame([{
        "model": "TinyUNet",
        "params": count,
        "params_m": count / 1e6,
        "flops": flops,
        "gflops": flops / 1e9,
        "latency_ms": latency_ms,
    }], columns=list(COMPLEXITY_COLUMNS))
    return enforce_dtypes(df, COMPLEXITY_COLUMNS)
