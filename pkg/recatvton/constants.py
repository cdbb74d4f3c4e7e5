"""Constants used throughout the application."""

# ----------------------------------------------------------------------
# Run configuration defaults
#
# Training defaults follow the hyperparameter table of the method (constant
# lr 1e-5, AdamW with weight decay 1e-2, betas 0.9/0.999, clipping at 1.0,
# DREAM lambda 10, 10% condition dropout). Batch size shrinks to desk scale
# while keeping gradient accumulation.

DEFAULT_CONFIG = {
    "schedule.kind": "scaled_linear",
    "schedule.T": 1000,
    "schedule.beta_start": 8.5e-4,
    "schedule.beta_end": 1.2e-2,
    "model.C": 4,
    "model.H": 32,
    "model.W": 24,
    "model.F": 32,
    "model.groups": 8,
    "model.garment_timestep": True,
    "train.lr": 1e-5,
    "train.weight_decay": 1e-2,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.grad_clip": 1.0,
    "train.batch": 8,
    "train.grad_accum": 2,
    "train.steps": 2000,
    "train.lambda": 10.0,
    "train.dropout_p": 0.1,
    "train.variant": "recatvton",
    "train.seed": 0,
    "train.loss": "outfit_only",
    "train.dream": True,
    "train.freeze": [],
    "train.checkpoint_every": 500,
    "train.log_every": 10,
    "cfg.variant": "recatvton",
    "cfg.omega": 2.5,
    "sampler.steps": 50,
    "sampler.kind": "ddpm",
    "sampler.gt_injection": True,
    "sampler.seed": 0,
    "data.n_train": 512,
    "data.n_test": 64,
    "data.n_patterns": 6,
    "data.seed": 0,
    "eval.embed_seed": 0,
    "eval.embed_dim": 64,
    "eval.chunk": 8,
}

SCHEDULE_KINDS = ("linear", "scaled_linear")
SAMPLER_KINDS = ("ddpm", "ddim")
VARIANTS = ("catvton", "recatvton")
LOSS_KINDS = ("outfit_only", "full")
PARAMETER_GROUPS = ("stem", "block1", "down", "up", "block2", "head")

# Guidance scales of the robustness sweep.
SWEEP_OMEGAS = (1.0, 1.5, 2.5, 5.0, 7.5)

# ----------------------------------------------------------------------
# Binary formats

GRID_MAGIC = b"LGRD"
GRID_VERSION = 1
DATASET_MAGIC = b"RCDS"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"RCVT"
CHECKPOINT_VERSION = 1

# ----------------------------------------------------------------------
# Tabular outputs

METRIC_COLUMNS = {
    "mode": "string[python]",
    "ssim": "float64",
    "fid_g": "float64",
    "kid_p": "float64",
    "kid_p_x1000": "float64",
    "n_real": "int",
    "n_fake": "int",
}

GROUP_METRIC_COLUMNS = {"group_by": "string[python]", "group": "string[python]", **METRIC_COLUMNS}

SWEEP_COLUMNS = {
    "variant": "string[python]",
    "omega": "float64",
    "mode": "string[python]",
    "ssim": "float64",
    "fid_g": "float64",
    "kid_p": "float64",
    "kid_p_x1000": "float64",
    "n_real": "int",
    "n_fake": "int",
}

TRAIN_LOG_COLUMNS = {
    "step": "int",
    "loss": "float64",
    "omega_t_mean": "float64",
    "grad_norm": "float64",
    "t_mean": "float64",
}

CHECKPOINT_COLUMNS = {
    "path": "string[python]",
    "step": "int",
    "size": "int",
    "mtime": "datetime64[ns, UTC]",
}

ABLATION_COLUMNS = {
    "stage": "string[python]",
    "seed": "int",
    "mode": "string[python]",
    "omega": "float64",
    "ssim": "float64",
    "fid_g": "float64",
    "kid_p": "float64",
}

ROBUSTNESS_COLUMNS = {
    "variant": "string[python]",
    "seed": "int",
    "omega": "float64",
    "mode": "string[python]",
    "fid_g": "float64",
}

COMPLEXITY_COLUMNS = {
    "model": "string[python]",
    "params": "int",
    "params_m": "float64",
    "flops": "int",
    "gflops": "float64",
    "latency_ms": "float64",
}
