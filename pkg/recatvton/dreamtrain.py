"""Outfit-only DREAM training.

One training step per micro-batch sample:

1. draw t and the duo noise, noise the clean duo (person above garment);
2. run a frozen pass on the noisy input to get the stop-gradient estimate;
3. rectify the target and the person rows of the input with the weight
   (1 − alpha_bar_t)^(lambda/2);
4. run the trainable pass and take the MSE over the person rows only.

Micro-batch gradients are summed in a fixed order, clipped by global norm
and applied with AdamW.
"""

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
import time
from typing import List, Optional, Sequence, Tuple
from consistent_df import enforce_dtypes
import numpy as np
import pandas as pd
from .checkpoint import Checkpoint, save_checkpoint
from .constants import LOSS_KINDS, PARAMETER_GROUPS, TRAIN_LOG_COLUMNS
from .denoiser import TinyUNet, TinyUNetParams
from .errors import InsufficientSamples, InvalidConfig, NonFiniteValues, ShapeMismatch
from .gridcore import check_same_shape, DuoGrid, elementwise, LatentGrid, spatial_concat
from .guidance import (
    assemble_conditional_input, assemble_unconditional_input, ConditioningVariant, ModelInput
)
from .rng import Stream, stream
from .run_directory import checkpoint_name
from .schedule import forward_diffuse, NoiseSchedule
from .toydata import ToyScene

logger = logging.getLogger(__name__)

ADAM_EPS = 1e-8
METRICS_LOG = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    dream_lambda: float = 10.0
    lr: float = 1e-5
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip_norm: float = 1.0
    batch_size: int = 8
    grad_accum: int = 2
    steps: int = 2000
    dropout_p: float = 0.1
    variant: ConditioningVariant = ConditioningVariant.RECATVTON
    seed: int = 0
    loss: str = "outfit_only"
    dream: bool = True
    freeze: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variant", ConditioningVariant(self.variant))
        object.__setattr__(self, "freeze", tuple(self.freeze))
        if not 0.0 <= self.dropout_p <= 1.0:
            raise InvalidConfig(f"dropout_p must lie in [0, 1], got {self.dropout_p}.")
        if not self.dream_lambda >= 0:
            raise InvalidConfig(f"DREAM lambda must be >= 0, got {self.dream_lambda}.")
        for name in ("lr", "grad_clip_norm"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive, got {getattr(self, name)}.")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be >= 0, got {self.weight_decay}.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig(f"Betas must lie in [0, 1), got {self.beta1}, {self.beta2}.")
        if self.batch_size < 1 or self.grad_accum < 1 or self.steps < 0:
            raise InvalidConfig(
                f"Need batch_size, grad_accum >= 1 and steps >= 0, got "
                f"{self.batch_size}, {self.grad_accum}, {self.steps}."
            )
        if self.loss not in LOSS_KINDS:
            raise InvalidConfig(f"Unknown loss '{self.loss}'.")
        unknown = set(self.freeze) - set(PARAMETER_GROUPS)
        if unknown:
            raise InvalidConfig(f"Unknown parameter groups to freeze: {sorted(unknown)}.")


@dataclass(frozen=True, eq=False)
class AdamWState:
    m: TinyUNetParams
    v: TinyUNetParams
    step: int = 0

    @classmethod
    def zeros(cls, params: TinyUNetParams) -> "AdamWState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-sample loss terms. `objective` is the optimized value: the person
    MSE under the outfit-only loss, the full-duo MSE under the full loss.
    """

    person_mse: float
    omega_t_value: float
    t_sampled: int
    objective: float = None

    def __post_init__(self):
        if self.objective is None:
            object.__setattr__(self, "objective", self.person_mse)


@dataclass(frozen=True, eq=False)
class StepResult:
    params: TinyUNetParams
    state: AdamWState
    losses: List[LossBreakdown] = field(default_factory=list)
    grad_norm: float = 0.0

    @property
    def loss(self) -> float:
        return float(np.mean([b.objective for b in self.losses]))


# ----------------------------------------------------------------------
# DREAM formulas

def omega_t(dream_lambda: float, t: int, s: NoiseSchedule) -> float:
    """Time-dependent DREAM weight (1 − alpha_bar_t)^(lambda/2), in [0, 1]."""
    if not dream_lambda >= 0:
        raise InvalidConfig(f"DREAM lambda must be >= 0, got {dream_lambda}.")
    s.check_t(t)
    return float((1.0 - s.alpha_bar[t]) ** (dream_lambda / 2.0))


@elementwise
def dream_target(eps_bar_p, eps_sg_p, w):
    """Rectified person-region target eps_bar + w·(eps_bar − eps_sg)."""
    check_same_shape(eps_bar_p, eps_sg_p)
    return eps_bar_p + w * (eps_bar_p - eps_sg_p)


@elementwise
def rectify_input(z_bar, eps_bar_p, eps_sg_p, w, t: int, s: NoiseSchedule):
    """Shifts the person rows by sqrt(1 − alpha_bar_t)·w·(eps_bar − eps_sg).

    Garment rows are returned unchanged.
    """
    check_same_shape(eps_bar_p, eps_sg_p)
    h = np.shape(eps_bar_p)[-2]
    expected = np.shape(eps_bar_p)[:-2] + (2 * h, np.shape(eps_bar_p)[-1])
    if np.shape(z_bar) != expected:
        raise ShapeMismatch(f"Duo {np.shape(z_bar)} does not match person noise {expected}.")
    s.check_t(t)
    out = np.array(z_bar, dtype=np.float64, copy=True)
    out[..., :h, :] = z_bar[..., :h, :] + np.sqrt(1.0 - s.alpha_bar[t]) * w * (
        eps_bar_p - eps_sg_p
    )
    return out


# ----------------------------------------------------------------------
# Losses

def _person_loss(pred: np.ndarray, target_p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample person-row MSE of a batch and its gradient w.r.t. `pred`."""
    h = target_p.shape[-2]
    if pred.shape[:-2] != target_p.shape[:-2] or pred.shape[-2:] != (2 * h, target_p.shape[-1]):
        raise ShapeMismatch(f"Prediction {pred.shape} does not match target {target_p.shape}.")
    diff = pred[..., :h, :] - target_p
    n = diff[0].size
    mse = (diff ** 2).reshape(len(diff), -1).mean(axis=1)
    grad = np.zeros_like(pred)
    grad[..., :h, :] = 2.0 * diff / n
    return mse, grad


def _full_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    check_same_shape(pred, target)
    diff = pred - target
    mse = (diff ** 2).reshape(len(diff), -1).mean(axis=1)
    return mse, 2.0 * diff / diff[0].size


def outfit_only_loss(
    eps_pred, dream_target_p, t: int = 0, omega_t_value: float = 1.0
) -> Tuple[LossBreakdown, object]:
    """Person-region MSE of one prediction against the rectified target.

    Args:
        eps_pred (DuoGrid | np.ndarray): Predicted duo noise (C, 2H, W).
        dream_target_p (LatentGrid | np.ndarray): Target for the person rows (C, H, W).
        t (int): Timestep, recorded in the breakdown.
        omega_t_value (float): DREAM weight, recorded in the breakdown.

    Returns:
        Tuple[LossBreakdown, DuoGrid | np.ndarray]: The loss and its gradient
        w.r.t. `eps_pred`, zero on every garment row.
    """
    pred = eps_pred.data if isinstance(eps_pred, DuoGrid) else np.asarray(eps_pred)
    target = dream_target_p
    if isinstance(target, LatentGrid):
        target = target.data
    mse, grad = _person_loss(pred[None], np.asarray(target)[None])
    breakdown = LossBreakdown(float(mse[0]), float(omega_t_value), int(t))
    if isinstance(eps_pred, DuoGrid):
        return breakdown, DuoGrid(LatentGrid(grad[0]), eps_pred.region_height)
    return breakdown, grad[0]


# ----------------------------------------------------------------------
# Condition dropout

def dropout_decision(rng: np.random.Generator, p: float) -> bool:
    if not 0.0 <= p <= 1.0:
        raise InvalidConfig(f"Dropout probability must lie in [0, 1], got {p}.")
    return bool(rng.random() < p)


def _select_input(drop: bool, variant, zt_duo: DuoGrid, mask, zp0_masked, zg0) -> ModelInput:
    if drop:
        return assemble_unconditional_input(variant, zt_duo, mask, zp0_masked)
    return assemble_conditional_input(zt_duo, mask, zp0_masked, zg0)


def _training_input(drop: bool, variant, zt_duo: DuoGrid, scene: ToyScene) -> ModelInput:
    return _select_input(drop, variant, zt_duo, scene.mask, scene.person_masked, scene.garment)


def cond_dropout(
    rng: np.random.Generator, p: float, variant, zt_duo: DuoGrid, mask, zp0_masked, zg0
) -> ModelInput:
    """Unconditional input of `variant` with probability `p`, else the conditional one.

    A dropped input is the one sampling feeds the unconditional guidance branch.
    """
    return _select_input(dropout_decision(rng, p), variant, zt_duo, mask, zp0_masked, zg0)


# ----------------------------------------------------------------------
# Optimizer

def clip_grad_norm(grads: TinyUNetParams, max_norm: float) -> Tuple[TinyUNetParams, float]:
    """Scales all gradients by max_norm / total_norm if the global L2 norm exceeds max_norm."""
    if not max_norm > 0:
        raise InvalidConfig(f"max_norm must be positive, got {max_norm}.")
    total = math.sqrt(sum(float(np.sum(g ** 2)) for _, g in grads.items()))
    if total <= max_norm:
        return grads, total
    scale = max_norm / total
    return TinyUNetParams({k: g * scale for k, g in grads.items()}), total


def adamw_step(
    state: AdamWState, params: TinyUNetParams, grads: TinyUNetParams, cfg: TrainConfig
) -> Tuple[TinyUNetParams, AdamWState]:
    """One AdamW update with bias correction and decoupled weight decay.

    Parameters in the frozen groups of `cfg` keep their values and moments.

    Raises:
        ShapeMismatch: If params, grads and moments differ in layout.
    """
    for other in (grads, state.m, state.v):
        if not params.same_layout(other):
            raise ShapeMismatch("Parameters, gradients and moments differ in layout.")
    step = state.step + 1
    c1 = 1.0 - cfg.beta1 ** step
    c2 = 1.0 - cfg.beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        if params.group_of(name) in cfg.freeze:
            new_p[name], new_m[name], new_v[name] = theta, state.m[name], state.v[name]
            continue
        g = grads[name]
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS) + cfg.weight_decay * theta
        new_p[name], new_m[name], new_v[name] = theta - cfg.lr * update, m, v
    return TinyUNetParams(new_p), AdamWState(TinyUNetParams(new_m), TinyUNetParams(new_v), step)


def _add(a: TinyUNetParams, b: TinyUNetParams) -> TinyUNetParams:
    return TinyUNetParams({k: a[k] + b[k] for k in a})


def _zero_frozen(grads: TinyUNetParams, freeze: Sequence[str]) -> TinyUNetParams:
    if not freeze:
        return grads
    return TinyUNetParams({
        k: np.zeros_like(g) if grads.group_of(k) in freeze else g for k, g in grads.items()
    })


# ----------------------------------------------------------------------
# Training step

def micro_batch_loss(
    net: TinyUNet,
    params: TinyUNetParams,
    frozen_params: TinyUNetParams,
    scenes: Sequence[ToyScene],
    keys: Sequence[Tuple[int, ...]],
    cfg: TrainConfig,
    s: NoiseSchedule,
    scale: float = 1.0,
) -> Tuple[List[LossBreakdown], TinyUNetParams]:
    """Losses of one micro-batch and the gradient of scale·Σ objective.

    `frozen_params` feed the stop-gradient pass and are treated as constants.
    Each sample's random draws come from streams keyed by its entry in `keys`.
    """
    C, H, W = scenes[0].person_full.shape
    ts, eps_bars, z_bars, drops = [], [], [], []
    for scene, key in zip(scenes, keys):
        t = int(stream(cfg.seed, Stream.TIMESTEP, *key).integers(s.T))
        eps = stream(cfg.seed, Stream.TRAIN_NOISE, *key).standard_normal((C, 2 * H, W))
        z0 = spatial_concat(scene.person_full, scene.garment)
        ts.append(t)
        eps_bars.append(eps)
        z_bars.append(forward_diffuse(z0, t, DuoGrid(LatentGrid(eps), H), s))
        drops.append(dropout_decision(stream(cfg.seed, Stream.DROPOUT, *key), cfg.dropout_p))
    ts = np.array(ts)
    eps_bars = np.stack(eps_bars)
    inputs = [_training_input(d, cfg.variant, z, sc) for d, z, sc in zip(drops, z_bars, scenes)]
    x = np.stack([model_input.grid.data for model_input in inputs])

    outfit_only = cfg.loss == "outfit_only"
    if outfit_only and cfg.dream:
        eps_sg, _ = net.forward(frozen_params, x, ts)
        w = np.array([omega_t(cfg.dream_lambda, t, s) for t in ts])
        eps_bar_p, eps_sg_p = eps_bars[:, :, :H], eps_sg[:, :, :H]
        target = dream_target(eps_bar_p, eps_sg_p, w[:, None, None, None])
        rectified = [
            rectify_input(
                z_bars[n], LatentGrid(eps_bar_p[n]), LatentGrid(eps_sg_p[n]), w[n], ts[n], s
            )
            for n in range(len(scenes))
        ]
        x = np.stack([
            _training_input(d, cfg.variant, z, sc).grid.data
            for d, z, sc in zip(drops, rectified, scenes)
        ])
    else:
        w = np.zeros(len(scenes))
        target = eps_bars[:, :, :H]

    pred, tape = net.forward(params, x, ts)
    person_mse, person_grad = _person_loss(pred, target)
    if outfit_only:
        objective, grad = person_mse, person_grad
    else:
        objective, grad = _full_loss(pred, eps_bars)
    grads = net.backward(params, tape, scale * grad)
    losses = [
        LossBreakdown(float(person_mse[n]), float(w[n]), int(ts[n]), float(objective[n]))
        for n in range(len(scenes))
    ]
    return losses, grads


def accumulate_gradients(
    net: TinyUNet,
    params: TinyUNetParams,
    frozen_params: TinyUNetParams,
    scenes: Sequence[ToyScene],
    step: int,
    cfg: TrainConfig,
    s: NoiseSchedule,
) -> Tuple[List[LossBreakdown], TinyUNetParams]:
    """Losses of all grad_accum micro-batches of `step` and the gradient of
    their mean objective, with `frozen_params` held constant.

    Raises:
        InsufficientSamples: If `scenes` is empty.
    """
    if not scenes:
        raise InsufficientSamples("Training needs at least one scene.")
    scale = 1.0 / (cfg.batch_size * cfg.grad_accum)
    total, losses = None, []
    for micro in range(cfg.grad_accum):
        rng = stream(cfg.seed, Stream.BATCH, step, micro)
        picks = rng.choice(len(scenes), size=cfg.batch_size, replace=len(scenes) < cfg.batch_size)
        batch = [scenes[i] for i in picks]
        keys = [(step, micro, j) for j in range(cfg.batch_size)]
        micro_losses, grads = micro_batch_loss(
            net, params, frozen_params, batch, keys, cfg, s, scale
        )
        losses.extend(micro_losses)
        total = grads if total is None else _add(total, grads)
    return losses, total


def train_step(
    net: TinyUNet,
    params: TinyUNetParams,
    state: AdamWState,
    scenes: Sequence[ToyScene],
    step: int,
    cfg: TrainConfig,
    s: NoiseSchedule,
) -> StepResult:
    """One optimizer step over grad_accum micro-batches drawn from `scenes`.

    The frozen pass uses the parameters as they are at the start of the
    step. Deterministic given `cfg.seed` and `step`.

    Raises:
        InsufficientSamples: If `scenes` is empty.
    """
    losses, total = accumulate_gradients(net, params, params.copy(), scenes, step, cfg, s)
    total = _zero_frozen(total, cfg.freeze)
    clipped, grad_norm = clip_grad_norm(total, cfg.grad_clip_norm)
    new_params, new_state = adamw_step(state, params, clipped, cfg)
    return StepResult(new_params, new_state, losses, grad_norm)


def validation_loss(
    net: TinyUNet, params: TinyUNetParams, scenes: Sequence[ToyScene], s: NoiseSchedule,
    seed: int = 0,
) -> float:
    """Mean person-row noise MSE on conditional inputs, with fixed per-scene draws."""
    if not scenes:
        raise InsufficientSamples("Validation needs at least one scene.")
    C, H, W = scenes[0].person_full.shape
    ts, eps_bars, x = [], [], []
    for i, scene in enumerate(scenes):
        rng = stream(seed, Stream.VALIDATION, i)
        t = int(rng.integers(s.T))
        eps = rng.standard_normal((C, 2 * H, W))
        z0 = spatial_concat(scene.person_full, scene.garment)
        zt = forward_diffuse(z0, t, DuoGrid(LatentGrid(eps), H), s)
        ts.append(t)
        eps_bars.append(eps)
        x.append(_training_input(False, ConditioningVariant.RECATVTON, zt, scene).grid.data)
    pred, _ = net.forward(params, np.stack(x), np.array(ts))
    mse, _ = _person_loss(pred, np.stack(eps_bars)[:, :, :H])
    return float(mse.mean())


# ----------------------------------------------------------------------
# Training loop

class Trainer:
    """Runs training steps, writes the metrics log and periodic checkpoints."""

    def __init__(
        self,
        net: TinyUNet,
        cfg: TrainConfig,
        schedule: NoiseSchedule,
        scenes: Sequence[ToyScene],
        run_dir: Optional[str | Path] = None,
        config: Optional[dict] = None,
        checkpoint_every: int = 500,
        log_every: int = 10,
        validation_scenes: Optional[Sequence[ToyScene]] = None,
    ):
        if checkpoint_every < 1 or log_every < 1:
            raise InvalidConfig(
                f"checkpoint_every and log_every must be >= 1, got "
                f"{checkpoint_every}, {log_every}."
            )
        self.net = net
        self.cfg = cfg
        self.schedule = schedule
        self.scenes = list(scenes)
        self.run_dir = None if run_dir is None else Path(run_dir).expanduser()
        self.config = config or {}
        self.checkpoint_every = checkpoint_every
        self.log_every = log_every
        self.validation_scenes = list(validation_scenes or [])

    def _log_metrics(self, step: int, result: StepResult):
        if self.run_dir is None:
            return
        record = {
            "step": step,
            "loss": result.loss,
            "omega_t_mean": float(np.mean([b.omega_t_value for b in result.losses])),
            "grad_norm": result.grad_norm,
            "t_mean": float(np.mean([b.t_sampled for b in result.losses])),
        }
        with open(self.run_dir / METRICS_LOG, "a") as f:
            f.write(json.dumps(record) + "\n")

    def _trim_log(self, start_step: int):
        """Drops logged steps at or after `start_step`, which are about to be rerun."""
        path = self.run_dir / METRICS_LOG
        if not path.is_file():
            return
        kept = [
            line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)["step"] < start_step
        ]
        path.write_text("".join(line + "\n" for line in kept))

    def _checkpoint(self, step: int, params: TinyUNetParams, state: AdamWState):
        if self.run_dir is None:
            return
        checkpoint = Checkpoint(
            config=self.config, step=step, params=params,
            m=state.m, v=state.v, optimizer_step=state.step,
        )
        save_checkpoint(checkpoint, self.run_dir / checkpoint_name(step))

    def fit(
        self,
        params: TinyUNetParams,
        state: Optional[AdamWState] = None,
        start_step: int = 0,
    ) -> Tuple[TinyUNetParams, AdamWState]:
        """Trains from `start_step` up to `cfg.steps` completed steps."""
        state = AdamWState.zeros(params) if state is None else state
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._trim_log(start_step)
        started = time.perf_counter()
        for step in range(start_step, self.cfg.steps):
            result = train_step(
                self.net, params, state, self.scenes, step, self.cfg, self.schedule
            )
            params, state = result.params, result.state
            if not params.is_finite():
                raise NonFiniteValues(f"Non-finite parameters after step {step}.")
            self._log_metrics(step, result)
            done = step + 1
            if done % self.log_every == 0 or done == self.cfg.steps:
                logger.info(
                    f"Step {done}/{self.cfg.steps}: loss {result.loss:.5f}, "
                    f"grad norm {result.grad_norm:.4f}."
                )
            if done % self.checkpoint_every == 0 or done == self.cfg.steps:
                self._checkpoint(done, params, state)
                if self.validation_scenes:
                    loss = validation_loss(self.net, params, self.validation_scenes, self.schedule)
                    logger.info(f"Validation person MSE at step {done}: {loss:.5f}.")
        logger.debug(f"Training took {time.perf_counter() - started:.1f}s.")
        return params, state


def read_metrics_log(path: str | Path) -> pd.DataFrame:
    """Reads a JSON-lines metrics log into a DataFrame with TRAIN_LOG_COLUMNS schema."""
    path = Path(path).expanduser()
    if not path.is_file():
        raise FileNotFoundError(f"Metrics log not found: '{path}'")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    df = pd.DataFrame(records, columns=list(TRAIN_LOG_COLUMNS))
    return enforce_dtypes(df, TRAIN_LOG_COLUMNS)
