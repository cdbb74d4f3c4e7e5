"""Run configuration: a flat document of dotted keys with validated values.

Config files are JSON. Nested objects are flattened, so
``{"train": {"lr": 1e-4}}`` and ``{"train.lr": 1e-4}`` are equivalent.
Missing keys take the values of `DEFAULT_CONFIG`; unknown keys are rejected.
"""

import json
import math
from pathlib import Path
from typing import Callable, Dict, Optional
from .constants import (
    DEFAULT_CONFIG,
    LOSS_KINDS,
    PARAMETER_GROUPS,
    SAMPLER_KINDS,
    SCHEDULE_KINDS,
    VARIANTS
)
from .denoiser import DenoiserInputSpec, TinyUNetConfig
from .dreamtrain import TrainConfig
from .errors import FormatError, ValidationError
from .evalmetrics import EmbeddingSpec
from .guidance import GuidanceConfig
from .schedule import build_schedule, NoiseSchedule
from .toydata import SceneParams
from .tryon import SamplerConfig


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


def _unit_interval(v) -> bool:
    return 0 <= v <= 1


def _beta(v) -> bool:
    return 0 <= v < 1


def _one_of(options) -> Callable[[object], bool]:
    return lambda v: v in options


# (predicate, description) per key; keys without an entry only get a type check.
_CHECKS: Dict[str, tuple] = {
    "schedule.kind": (_one_of(SCHEDULE_KINDS), f"one of {SCHEDULE_KINDS}"),
    "schedule.T": (_positive, "positive"),
    "schedule.beta_start": (lambda v: 0 < v < 1, "in (0, 1)"),
    "schedule.beta_end": (lambda v: 0 < v < 1, "in (0, 1)"),
    "model.C": (_positive, "positive"),
    "model.H": (lambda v: v >= 8 and v % 2 == 0, "even and >= 8"),
    "model.W": (lambda v: v >= 8 and v % 2 == 0, "even and >= 8"),
    "model.F": (lambda v: v >= 2 and v % 2 == 0, "even and >= 2"),
    "model.groups": (_positive, "positive"),
    "train.lr": (_positive, "positive"),
    "train.weight_decay": (_non_negative, ">= 0"),
    "train.beta1": (_beta, "in [0, 1)"),
    "train.beta2": (_beta, "in [0, 1)"),
    "train.grad_clip": (_positive, "positive"),
    "train.batch": (_positive, "positive"),
    "train.grad_accum": (_positive, "positive"),
    "train.steps": (_non_negative, ">= 0"),
    "train.lambda": (_non_negative, ">= 0"),
    "train.dropout_p": (_unit_interval, "in [0, 1]"),
    "train.variant": (_one_of(VARIANTS), f"one of {VARIANTS}"),
    "train.seed": (_non_negative, ">= 0"),
    "train.loss": (_one_of(LOSS_KINDS), f"one of {LOSS_KINDS}"),
    "train.freeze": (
        lambda v: all(g in PARAMETER_GROUPS for g in v), f"a list of {PARAMETER_GROUPS}"
    ),
    "train.checkpoint_every": (_positive, "positive"),
    "train.log_every": (_positive, "positive"),
    "cfg.variant": (_one_of(VARIANTS), f"one of {VARIANTS}"),
    "cfg.omega": (lambda v: math.isfinite(v) and v >= 0, "finite and >= 0"),
    "sampler.steps": (_positive, "positive"),
    "sampler.kind": (_one_of(SAMPLER_KINDS), f"one of {SAMPLER_KINDS}"),
    "sampler.seed": (_non_negative, ">= 0"),
    "data.n_train": (_non_negative, ">= 0"),
    "data.n_test": (lambda v: v >= 0 and v % 2 == 0, "even and >= 0"),
    "data.n_patterns": (lambda v: v >= 2, ">= 2"),
    "data.seed": (_non_negative, ">= 0"),
    "eval.embed_seed": (_non_negative, ">= 0"),
    "eval.embed_dim": (_positive, "positive"),
    "eval.chunk": (_positive, "positive"),
}


def flatten(document: dict, prefix: str = "") -> Dict[str, object]:
    """Flattens nested objects into dotted keys."""
    flat = {}
    for key, value in document.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _check_type(key: str, value):
    default = DEFAULT_CONFIG[key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ValidationError(key, f"Expected {type(default).__name__}, got {value!r}.")


class RunConfig:
    """Fully resolved run configuration."""

    def __init__(self, values: Optional[dict] = None):
        flat = flatten(values or {})
        unknown = sorted(set(flat) - set(DEFAULT_CONFIG))
        if unknown:
            raise ValidationError(unknown[0], f"Unknown configuration key '{unknown[0]}'.")
        resolved = dict(DEFAULT_CONFIG)
        resolved.update(flat)
        for key, value in resolved.items():
            _check_type(key, value)
            if key in _CHECKS:
                predicate, description = _CHECKS[key]
                if not predicate(value):
                    raise ValidationError(key, f"'{key}' must be {description}, got {value!r}.")
        self.values = {
            k: float(v) if isinstance(DEFAULT_CONFIG[k], float) else v
            for k, v in resolved.items()
        }
        self._check_cross_keys()

    def _check_cross_keys(self):
        v = self.values
        if v["schedule.beta_end"] < v["schedule.beta_start"]:
            raise ValidationError("schedule.beta_end", "beta_end must be >= beta_start.")
        if v["model.F"] % v["model.groups"]:
            raise ValidationError(
                "model.F", f"model.F={v['model.F']} is not divisible by {v['model.groups']} groups."
            )
        if v["sampler.steps"] > v["schedule.T"]:
            raise ValidationError(
                "sampler.steps", f"sampler.steps={v['sampler.steps']} exceeds T={v['schedule.T']}."
            )

    def __getitem__(self, key: str):
        return self.values[key]

    def to_dict(self) -> Dict[str, object]:
        return dict(self.values)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the training, sampler and data seeds replaced."""
        values = self.to_dict()
        for key in ("train.seed", "sampler.seed", "data.seed"):
            values[key] = int(seed)
        return RunConfig(values)

    def with_values(self, **overrides) -> "RunConfig":
        """Copy with dotted keys overridden; pass them as ``**{"cfg.omega": 1.0}``."""
        values = self.to_dict()
        values.update(overrides)
        return RunConfig(values)

    # ------------------------------------------------------------------
    # Module configurations

    def schedule(self) -> NoiseSchedule:
        return build_schedule(
            self["schedule.kind"], self["schedule.T"],
            self["schedule.beta_start"], self["schedule.beta_end"],
        )

    def scene_params(self) -> SceneParams:
        return SceneParams(
            C=self["model.C"], H=self["model.H"], W=self["model.W"],
            n_patterns=self["data.n_patterns"],
        )

    def net_config(self) -> TinyUNetConfig:
        spec = DenoiserInputSpec(self["model.C"], self["model.H"], self["model.W"])
        return TinyUNetConfig(
            input_spec=spec,
            features=self["model.F"],
            groups=self["model.groups"],
            T=self["schedule.T"],
            garment_timestep=self["model.garment_timestep"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            dream_lambda=self["train.lambda"],
            lr=self["train.lr"],
            weight_decay=self["train.weight_decay"],
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            grad_clip_norm=self["train.grad_clip"],
            batch_size=self["train.batch"],
            grad_accum=self["train.grad_accum"],
            steps=self["train.steps"],
            dropout_p=self["train.dropout_p"],
            variant=self["train.variant"],
            seed=self["train.seed"],
            loss=self["train.loss"],
            dream=self["train.dream"],
            freeze=tuple(self["train.freeze"]),
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            steps=self["sampler.steps"],
            sampler=self["sampler.kind"],
            guidance=GuidanceConfig(omega=self["cfg.omega"], variant=self["cfg.variant"]),
            gt_injection=self["sampler.gt_injection"],
            seed=self["sampler.seed"],
        )

    def embedding_spec(self) -> EmbeddingSpec:
        return EmbeddingSpec(
            seed=self["eval.embed_seed"],
            in_shape=(self["model.C"], self["model.H"], self["model.W"]),
            dim=self["eval.embed_dim"],
        )


def load_config(path: str | Path) -> RunConfig:
    """Loads and validates a JSON config file; a blank file yields the defaults.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: If the file is not a JSON object.
        ValidationError: If a key is unknown or a value out of range.
    """
    path = Path(path).expanduser()
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: '{path}'")
    text = path.read_text()
    if not text.strip():
        return RunConfig({})
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"Config file '{path}' is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise FormatError(f"Config file '{path}' must hold a JSON object.")
    return RunConfig(document)


def save_config(config: RunConfig, path: str | Path) -> Path:
    """Writes the resolved configuration, e.g. as an echo next to run outputs."""
    path = Path(path).expanduser()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
