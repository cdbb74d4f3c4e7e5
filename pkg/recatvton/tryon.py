"""Try-on sampling with ground-truth garment injection.

All scenes of a call are sampled together. The conditional and unconditional
inputs of one step share a single denoiser call. Random draws come from
per-scene streams keyed by the scene's index, so results do not depend on
how scenes are grouped into calls.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from typing import Callable, List, Optional, Sequence
import numpy as np
from .constants import SAMPLER_KINDS
from .errors import InvalidConfig, ShapeMismatch
from .gridcore import DuoGrid, LatentGrid
from .guidance import (
    assemble_conditional_input, assemble_unconditional_input, cfg_combine, GuidanceConfig
)
from .rng import Stream, stream
from .schedule import ddim_step, ddpm_step, forward_diffuse, NoiseSchedule, sampling_timesteps
from .toydata import ToyScene

logger = logging.getLogger(__name__)

# Called once per step with (step index, timestep, stacked denoiser inputs).
StepObserver = Callable[[int, int, np.ndarray], None]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    sampler: str = "ddpm"
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    gt_injection: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfig(f"Sampler steps must be >= 1, got {self.steps}.")
        if self.sampler not in SAMPLER_KINDS:
            raise InvalidConfig(f"Unknown sampler '{self.sampler}'.")


@dataclass(frozen=True, eq=False)
class TrajectoryState:
    """Current noisy duo latent of one trajectory and its fixed garment noise."""

    z: DuoGrid
    t: int
    fixed_garment_noise: LatentGrid

    def __post_init__(self):
        if self.fixed_garment_noise.shape != self.z.garment.shape:
            raise ShapeMismatch(
                f"Garment noise {self.fixed_garment_noise.shape} does not match "
                f"garment region {self.z.garment.shape}."
            )


def inject_garment_gt(state: TrajectoryState, zg0: LatentGrid, s: NoiseSchedule) -> TrajectoryState:
    """Overwrites the garment rows with the exact noisy garment at `state.t`.

    Raises:
        ShapeMismatch: If `zg0` does not match the garment region.
        IndexOutOfRange: If `state.t` is outside the schedule.
    """
    s.check_t(state.t)
    if zg0.shape != state.z.garment.shape:
        raise ShapeMismatch(
            f"Garment {zg0.shape} does not match garment region {state.z.garment.shape}."
        )
    noisy = forward_diffuse(zg0, state.t, state.fixed_garment_noise, s)
    data = state.z.data.copy()
    data[:, state.z.region_height:] = noisy.data
    z = DuoGrid(LatentGrid(data), state.z.region_height)
    return TrajectoryState(z, state.t, state.fixed_garment_noise)


def _initial_noise(seed: int, key: int, shape) -> np.ndarray:
    return stream(seed, Stream.INIT_NOISE, key).standard_normal(shape)


def _garment_noise(seed: int, key: int, shape) -> np.ndarray:
    return stream(seed, Stream.GARMENT_NOISE, key).standard_normal(shape)


def _step_noise(seed: int, key: int, step: int, shape) -> np.ndarray:
    return stream(seed, Stream.STEP_NOISE, key, step).standard_normal(shape)


def sample_tryon_batch(
    denoiser,
    scenes: Sequence[ToyScene],
    cfg: SamplerConfig,
    s: NoiseSchedule,
    keys: Optional[Sequence[int]] = None,
    observer: Optional[StepObserver] = None,
) -> List[LatentGrid]:
    """Runs the try-on trajectories of several scenes in lockstep.

    Each step injects the ground-truth garment (if enabled), builds the
    conditional and unconditional inputs, predicts noise for both in one
    call, combines them with classifier-free guidance and applies the
    sampler step. At omega = 1 the unconditional pass is skipped, since its
    weight is exactly zero.

    Args:
        denoiser: Object with `predict(x, t)` on batched inputs.
        scenes (Sequence[ToyScene]): Scenes of one shape.
        cfg (SamplerConfig): Sampler settings.
        s (NoiseSchedule): Noise schedule.
        keys (Sequence[int], optional): Stream key per scene; defaults to
            the position in `scenes`.
        observer (StepObserver, optional): Receives the denoiser input of
            every step.

    Returns:
        List[LatentGrid]: Person-region results; unmasked cells equal the
        masked person input exactly.
    """
    if not scenes:
        return []
    keys = list(range(len(scenes))) if keys is None else list(keys)
    if len(keys) != len(scenes):
        raise InvalidConfig(f"Got {len(keys)} stream keys for {len(scenes)} scenes.")
    shapes = {scene.person_masked.shape for scene in scenes}
    if len(shapes) > 1:
        raise ShapeMismatch(f"Scenes differ in shape: {sorted(shapes)}.")
    C, H, W = shapes.pop()
    timesteps = sampling_timesteps(s.T, cfg.steps)
    guidance = cfg.guidance

    garments = np.stack([scene.garment.data for scene in scenes])
    garment_noise = np.stack([_garment_noise(cfg.seed, k, (C, H, W)) for k in keys])
    z = np.stack([_initial_noise(cfg.seed, k, (C, 2 * H, W)) for k in keys])

    for i, t in enumerate(timesteps):
        t = int(t)
        t_prev = int(timesteps[i + 1]) if i + 1 < len(timesteps) else -1
        if cfg.gt_injection:
            z[:, :, H:] = forward_diffuse(garments, t, garment_noise, s)

        duos = [DuoGrid(LatentGrid(z[n]), H) for n in range(len(scenes))]
        inputs = [
            assemble_conditional_input(duo, scene.mask, scene.person_masked, scene.garment)
            for duo, scene in zip(duos, scenes)
        ]
        if guidance.omega != 1.0:
            inputs += [
                assemble_unconditional_input(guidance.variant, duo, scene.mask, scene.person_masked)
                for duo, scene in zip(duos, scenes)
            ]
        x = np.stack([model_input.grid.data for model_input in inputs])
        if observer is not None:
            observer(i, t, x)
        eps = np.asarray(denoiser.predict(x, np.full(len(x), t)))
        if guidance.omega != 1.0:
            eps = cfg_combine(eps[:len(scenes)], eps[len(scenes):], guidance.omega)

        if cfg.sampler == "ddpm":
            xi = np.stack([_step_noise(cfg.seed, k, i, z.shape[1:]) for k in keys])
            z = ddpm_step(z, eps, t, xi, s, t_prev=t_prev)
        else:
            z = ddim_step(z, eps, t, t_prev, s)
        logger.debug(f"Step {i} (t={t}): |z| mean {np.abs(z).mean():.4f}.")

    results = []
    for n, scene in enumerate(scenes):
        inside = scene.mask.values[None] == 1.0
        results.append(LatentGrid(np.where(inside, z[n, :, :H], scene.person_masked.data)))
    return results


def sample_tryon(denoiser, scene: ToyScene, cfg: SamplerConfig, s: NoiseSchedule) -> LatentGrid:
    """Samples the try-on result of one scene; deterministic given `cfg.seed`."""
    return sample_tryon_batch(denoiser, [scene], cfg, s)[0]


class TryOnSampler:
    """Try-on generator for evaluation.

    Scenes are cut into chunks of fixed size and the chunks run on a thread
    pool. Chunk boundaries and stream keys do not depend on `threads`.
    """

    def __init__(
        self,
        denoiser,
        cfg: SamplerConfig,
        schedule: NoiseSchedule,
        threads: int = 1,
        chunk: int = 8,
    ):
        if threads < 1 or chunk < 1:
            raise InvalidConfig(f"Need threads >= 1 and chunk >= 1, got {threads}, {chunk}.")
        self.denoiser = denoiser
        self.cfg = cfg
        self.schedule = schedule
        self.threads = threads
        self.chunk = chunk

    def generate(self, scenes: Sequence[ToyScene]) -> List[LatentGrid]:
        starts = range(0, len(scenes), self.chunk)

        def run(start: int) -> List[LatentGrid]:
            part = scenes[start:start + self.chunk]
            keys = range(start, start + len(part))
            return sample_tryon_batch(self.denoiser, part, self.cfg, self.schedule, keys=keys)

        if self.threads == 1:
            chunks = [run(start) for start in starts]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                chunks = list(pool.map(run, starts))
        logger.info(
            f"Sampled {len(scenes)} scenes (omega={self.cfg.guidance.omega}, "
            f"{self.cfg.guidance.variant.value}, {self.cfg.sampler})."
        )
        return [grid for part in chunks for grid in part]
