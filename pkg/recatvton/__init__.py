# flake8: noqa: F401

"""The recatvton package trains and evaluates a desk-scale latent-diffusion
virtual try-on model. A person and a garment latent are stacked into one
grid that a single denoiser reads. Training uses an outfit-only DREAM loss.
Sampling injects the ground-truth garment and applies classifier-free
guidance whose unconditional branch sees no garment at all.

Modules:
- gridcore: Latent grids, duo (person above garment) layout and masks.
- schedule: Noise schedules, forward diffusion, DDPM and DDIM steps.
- denoiser: TinyUNet with hand-written backward pass, analytic Gaussian oracle.
- guidance: Conditional/unconditional input assembly and guidance.
- tryon: Try-on sampling loop with ground-truth garment injection.
- dreamtrain: DREAM training step, AdamW and the training loop.
- toydata: Procedural person/garment scenes and dataset files.
- evalmetrics: SSIM, FID/KID proxies, evaluation and guidance sweeps.
- config, checkpoint, run_directory, images, experiments, cli: Runs and files.
"""

from .config import load_config, RunConfig
from .denoiser import AnalyticGaussianModel, NetworkDenoiser, TinyUNet, TinyUNetConfig
from .dreamtrain import TrainConfig, Trainer
from .evalmetrics import evaluate, evaluate_groups, sweep_guidance
from .gridcore import DuoGrid, LatentGrid, RegionMask
from .guidance import ConditioningVariant, GuidanceConfig
from .schedule import build_schedule
from .toydata import gen_dataset, gen_scene, OracleReconstructor
from .tryon import sample_tryon, SamplerConfig, TryOnSampler
from . import constants
