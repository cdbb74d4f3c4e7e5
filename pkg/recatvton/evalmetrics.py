"""Desk-scale try-on metrics.

SSIM compares outputs with ground truth on paired scenes. The distribution
metrics compare embeddings of generated and real persons, using a fixed
random conv feature extractor instead of an Inception network. Only
orderings between runs are meaningful, not absolute values.
"""

from dataclasses import dataclass, replace
from functools import cached_property
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
from consistent_df import enforce_dtypes
import matplotlib
import numpy as np
import pandas as pd
import scipy.linalg
from scipy.ndimage import gaussian_filter
from .constants import GROUP_METRIC_COLUMNS, METRIC_COLUMNS, SWEEP_COLUMNS, SWEEP_OMEGAS
from .errors import InsufficientSamples, InvalidConfig, ShapeMismatch, TooSmall
from .gridcore import LatentGrid
from .guidance import ConditioningVariant, GuidanceConfig
from .layers import conv2d_forward
from .rng import Stream, stream
from .schedule import NoiseSchedule
from .toydata import DatasetSplit, garment_family, ToyScene
from .tryon import SamplerConfig, TryOnSampler

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
COVARIANCE_SHRINKAGE = 1e-6
MODES = ("paired", "unpaired")
GROUPINGS = ("garment_family", "garment_id")


# ----------------------------------------------------------------------
# SSIM

def ssim(a: LatentGrid, b: LatentGrid, dynamic_range: float = 2.0) -> float:
    """Mean structural similarity over channels and 11×11 Gaussian windows.

    Windows use sigma 1.5 with symmetric padding at the borders.

    Raises:
        ShapeMismatch: If the grids differ in shape.
        TooSmall: If height or width is below the window size.
        InvalidConfig: If dynamic_range is not positive.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"Cannot compare {a.shape} with {b.shape}.")
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise TooSmall(
            f"SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {a.height}×{a.width}."
        )
    if not dynamic_range > 0:
        raise InvalidConfig(f"dynamic_range must be positive, got {dynamic_range}.")
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    radius = SSIM_WINDOW // 2

    def blur(x):
        return gaussian_filter(
            x, sigma=(0, SSIM_SIGMA, SSIM_SIGMA), truncate=radius / SSIM_SIGMA, mode="reflect"
        )

    x, y = a.data, b.data
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


# ----------------------------------------------------------------------
# Feature embedding

@dataclass(frozen=True)
class EmbeddingSpec:
    """Frozen random two-layer conv extractor with global average pooling.

    Filters are drawn from the seed's stream; biases are zero. With
    `nonlinear=False` the ReLU between the layers is dropped and the
    embedding is linear in its input.
    """

    seed: int
    in_shape: Tuple[int, int, int]
    dim: int = 64
    hidden: int = 16
    nonlinear: bool = True

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(n) for n in self.in_shape))
        if self.dim < 1 or self.hidden < 1:
            raise InvalidConfig(f"Need dim, hidden >= 1, got {self.dim}, {self.hidden}.")

    @cached_property
    def weights(self) -> Tuple[np.ndarray, np.ndarray]:
        rng = stream(self.seed, Stream.EMBED)
        c = self.in_shape[0]
        w1 = rng.standard_normal((self.hidden, c, 3, 3)) / np.sqrt(9 * c)
        w2 = rng.standard_normal((self.dim, self.hidden, 3, 3)) / np.sqrt(9 * self.hidden)
        return w1, w2

    def embed_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ShapeMismatch(f"Expected inputs (N, {self.in_shape}), got {x.shape}.")
        w1, w2 = self.weights
        h, _ = conv2d_forward(x, w1, np.zeros(self.hidden))
        if self.nonlinear:
            h = np.maximum(h, 0.0)
        h, _ = conv2d_forward(h, w2, np.zeros(self.dim))
        return h.mean(axis=(2, 3))


def embed(spec: EmbeddingSpec, x: LatentGrid) -> np.ndarray:
    """Embedding vector of one grid.

    Raises:
        ShapeMismatch: If `x` does not match the embedding's input shape.
    """
    return spec.embed_batch(x.data[None])[0]


def embed_grids(spec: EmbeddingSpec, grids: Sequence[LatentGrid], chunk: int = 64) -> np.ndarray:
    parts = [
        spec.embed_batch(np.stack([g.data for g in grids[i:i + chunk]]))
        for i in range(0, len(grids), chunk)
    ]
    return np.concatenate(parts) if parts else np.empty((0, spec.dim))


# ----------------------------------------------------------------------
# Distribution distances

def _features(feats, minimum: int, name: str) -> np.ndarray:
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"{name} features must be (n, d), got {x.shape}.")
    if len(x) < minimum:
        raise InsufficientSamples(f"{name} set needs at least {minimum} samples, got {len(x)}.")
    return x


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = scipy.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_proxy(real_feats, fake_feats) -> float:
    """Fréchet distance ‖mu1 − mu2‖² + Tr(S1 + S2 − 2(S1 S2)^½) between Gaussian fits.

    Both covariances get 1e-6·I added. The trace of (S1 S2)^½ is taken from
    the eigenvalues of S1^½ S2 S1^½, with negative ones clamped at zero.

    Raises:
        InsufficientSamples: If a set has fewer than 2 vectors.
    """
    x = _features(real_feats, 2, "Real")
    y = _features(fake_feats, 2, "Fake")
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatch(f"Feature sizes differ: {x.shape[1]} and {y.shape[1]}.")
    shrink = COVARIANCE_SHRINKAGE * np.eye(x.shape[1])
    s1 = np.atleast_2d(np.cov(x, rowvar=False)) + shrink
    s2 = np.atleast_2d(np.cov(y, rowvar=False)) + shrink
    root1 = _psd_sqrt(s1)
    middle = scipy.linalg.eigh(root1 @ s2 @ root1, eigvals_only=True)
    trace_sqrt = np.sqrt(np.clip(middle, 0.0, None)).sum()
    delta = x.mean(axis=0) - y.mean(axis=0)
    return float(delta @ delta + np.trace(s1) + np.trace(s2) - 2.0 * trace_sqrt)


def kid_poly(real_feats, fake_feats) -> float:
    """Unbiased MMD² with the cubic kernel (xᵀy/d + 1)³.

    Raises:
        InsufficientSamples: If a set has fewer than 2 vectors.
    """
    x = _features(real_feats, 2, "Real")
    y = _features(fake_feats, 2, "Fake")
    d = x.shape[1]
    if y.shape[1] != d:
        raise ShapeMismatch(f"Feature sizes differ: {d} and {y.shape[1]}.")
    n, m = len(x), len(y)
    k_xx = (x @ x.T / d + 1.0) ** 3
    k_yy = (y @ y.T / d + 1.0) ** 3
    k_xy = (x @ y.T / d + 1.0) ** 3
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (n * (n - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    return float(term_xx + term_yy - 2.0 * k_xy.mean())


# ----------------------------------------------------------------------
# Evaluation

@dataclass(frozen=True)
class MetricReport:
    """Metrics of one evaluation run; `ssim` is None in unpaired mode."""

    mode: str
    ssim: Optional[float]
    fid_g: float
    kid_p: float
    n_real: int
    n_fake: int

    @property
    def kid_p_x1000(self) -> float:
        return 1000.0 * self.kid_p

    def to_dict(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "ssim": np.nan if self.ssim is None else self.ssim,
            "fid_g": self.fid_g,
            "kid_p": self.kid_p,
            "kid_p_x1000": self.kid_p_x1000,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
        }


def _scenes_for(split: DatasetSplit, mode: str) -> List[ToyScene]:
    if mode not in MODES:
        raise InvalidConfig(f"Unknown evaluation mode '{mode}'.")
    return split.test_paired if mode == "paired" else split.test_unpaired


def _score(
    mode: str, fakes: Sequence[LatentGrid], reals: Sequence[LatentGrid], spec: EmbeddingSpec
) -> MetricReport:
    """Metrics of matched fakes and reals; distribution metrics are NaN below 2 samples."""
    score = None
    if mode == "paired":
        score = float(np.mean([ssim(f, r) for f, r in zip(fakes, reals)]))
    fid_g = kid_p = np.nan
    if len(reals) >= 2:
        real_feats = embed_grids(spec, reals)
        fake_feats = embed_grids(spec, fakes)
        fid_g = frechet_proxy(real_feats, fake_feats)
        kid_p = kid_poly(real_feats, fake_feats)
    return MetricReport(
        mode=mode, ssim=score, fid_g=fid_g, kid_p=kid_p, n_real=len(reals), n_fake=len(fakes)
    )


def evaluate(
    generator, split: DatasetSplit, spec: EmbeddingSpec, mode: str = "paired"
) -> MetricReport:
    """Scores a try-on generator on the paired or unpaired test scenes.

    Args:
        generator: Object with `generate(scenes) -> list[LatentGrid]`.
        split (DatasetSplit): Dataset with test scenes.
        spec (EmbeddingSpec): Feature extractor for the distribution metrics.
        mode (str): 'paired' adds SSIM against the ground-truth person;
                    'unpaired' reports the distribution metrics only.

    Raises:
        InsufficientSamples: If the requested test split has fewer than 2 scenes.
    """
    scenes = _scenes_for(split, mode)
    if len(scenes) < 2:
        raise InsufficientSamples(f"Need at least 2 {mode} test scenes, got {len(scenes)}.")
    fakes = generator.generate(scenes)
    report = _score(mode, fakes, [scene.person_full for scene in scenes], spec)
    logger.info(
        f"Evaluated {mode}: ssim={report.ssim}, fid_g={report.fid_g:.5f}, "
        f"kid_p={report.kid_p:.6f}."
    )
    return report


def _group_key(scene: ToyScene, group_by: str):
    if group_by == "garment_id":
        return scene.garment_id
    return garment_family(scene.garment_id)


def evaluate_groups(
    generator,
    split: DatasetSplit,
    spec: EmbeddingSpec,
    mode: str = "paired",
    group_by: str = "garment_family",
) -> pd.DataFrame:
    """Scores a try-on generator separately per garment or garment family.

    All scenes of the mode are generated in one pass, then split by the
    garment they try on. Generation is per-scene deterministic, so a group's
    row matches `evaluate` on a split holding only that group's scenes.
    Groups with a single scene get NaN distribution metrics.

    Args:
        group_by (str): 'garment_family' or 'garment_id'.

    Returns:
        pd.DataFrame: One row per group in sorted order, GROUP_METRIC_COLUMNS schema.

    Raises:
        InvalidConfig: On an unknown mode or grouping.
        InsufficientSamples: If the requested test split has fewer than 2 scenes.
    """
    if group_by not in GROUPINGS:
        raise InvalidConfig(f"Unknown grouping '{group_by}', expected one of {GROUPINGS}.")
    scenes = _scenes_for(split, mode)
    if len(scenes) < 2:
        raise InsufficientSamples(f"Need at least 2 {mode} test scenes, got {len(scenes)}.")
    fakes = generator.generate(scenes)
    keys = [_group_key(scene, group_by) for scene in scenes]
    rows = []
    for key in sorted(set(keys)):
        members = [i for i, k in enumerate(keys) if k == key]
        reals = [scenes[i].person_full for i in members]
        report = _score(mode, [fakes[i] for i in members], reals, spec)
        rows.append({"group_by": group_by, "group": str(key), **report.to_dict()})
    logger.info(f"Evaluated {mode} in {len(rows)} groups by {group_by}.")
    df = pd.DataFrame(rows, columns=list(GROUP_METRIC_COLUMNS))
    return enforce_dtypes(df, GROUP_METRIC_COLUMNS)


def reports_to_frame(reports: Iterable[MetricReport]) -> pd.DataFrame:
    df = pd.DataFrame([r.to_dict() for r in reports], columns=list(METRIC_COLUMNS))
    return enforce_dtypes(df, METRIC_COLUMNS)


def sweep_guidance(
    denoisers,
    split: DatasetSplit,
    spec: EmbeddingSpec,
    schedule: NoiseSchedule,
    sampler_cfg: SamplerConfig = SamplerConfig(),
    omegas: Sequence[float] = SWEEP_OMEGAS,
    variants: Sequence[str] = ("catvton", "recatvton"),
    modes: Sequence[str] = ("paired",),
    threads: int = 1,
    chunk: int = 8,
) -> pd.DataFrame:
    """Evaluates every (variant, omega, mode) combination.

    Args:
        denoisers: One denoiser for all variants, or a mapping from variant
            name to the denoiser trained for it.

    Returns:
        pd.DataFrame: One row per combination, SWEEP_COLUMNS schema.
    """
    if not omegas or not variants or not modes:
        raise InvalidConfig("Sweep needs at least one omega, variant and mode.")
    rows = []
    for variant in variants:
        variant = ConditioningVariant(variant)
        denoiser = denoisers[variant.value] if isinstance(denoisers, dict) else denoisers
        for omega in omegas:
            cfg = replace(sampler_cfg, guidance=GuidanceConfig(omega=float(omega), variant=variant))
            generator = TryOnSampler(denoiser, cfg, schedule, threads=threads, chunk=chunk)
            for mode in modes:
                report = evaluate(generator, split, spec, mode)
                rows.append({"variant": variant.value, "omega": float(omega), **report.to_dict()})
    df = pd.DataFrame(rows, columns=list(SWEEP_COLUMNS))
    return enforce_dtypes(df, SWEEP_COLUMNS)


def plot_sweep(df: pd.DataFrame, path: str | Path) -> Path:
    """Line chart of FID_g over omega, one line per variant and mode, as PNG."""
    path = Path(path).expanduser()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (variant, mode), group in df.groupby(["variant", "mode"], sort=True):
        group = group.sort_values("omega")
        ax.plot(group["omega"], group["fid_g"], marker="o", label=f"{variant} ({mode})")
    ax.set_xlabel("ω")
    ax.set_ylabel("FID_g")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)
    return path


def fid_range(df: pd.DataFrame) -> pd.Series:
    """max − min of FID_g over omega, per variant (and mode)."""
    return df.groupby(["variant", "mode"])["fid_g"].agg(lambda s: s.max() - s.min())
