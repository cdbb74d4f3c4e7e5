"""Procedural person/garment scenes in latent space.

The encoder is the identity, so latents are the images themselves. A garment
is a procedural texture (stripes, checks or blobs) with a small logo block.
A person is a smooth body field with the worn garment pasted into a
rectangle-with-notch mask through a body-dependent affine warp. Given the
dataset seed, the body id and the garment grid, the person is reproducible
exactly, see `OracleReconstructor`.
"""

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
import struct
from typing import List, Tuple
import numpy as np
from .constants import DATASET_MAGIC, DATASET_VERSION
from .errors import FormatError, InvalidConfig
from .gridcore import LatentGrid, mask_zero_region, read_grid, RegionMask
from .rng import Stream, stream

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIQI")
_COUNT = struct.Struct("<Q")
_IDS = struct.Struct("<III")
GARMENT_FAMILIES = ("stripes", "checks", "blobs")


@dataclass(frozen=True)
class SceneParams:
    C: int = 4
    H: int = 32
    W: int = 24
    n_patterns: int = 6

    def __post_init__(self):
        if self.H < 8 or self.W < 8:
            raise InvalidConfig(f"Scenes need H, W >= 8, got {self.H}×{self.W}.")
        if self.n_patterns < 2:
            raise InvalidConfig(f"Need at least 2 patterns, got {self.n_patterns}.")
        if self.C < 1:
            raise InvalidConfig(f"Need at least one channel, got {self.C}.")


@dataclass(frozen=True, eq=False)
class ToyScene:
    """One sample. `garment` is the garment to try on, `worn_garment_id` the
    garment `person_full` wears; both ids agree for paired scenes.
    """

    person_full: LatentGrid
    person_masked: LatentGrid
    garment: LatentGrid
    mask: RegionMask
    garment_id: int
    body_id: int
    worn_garment_id: int

    @property
    def is_paired(self) -> bool:
        return self.garment_id == self.worn_garment_id

    def to_bytes(self) -> bytes:
        parts = []
        for grid in (self.person_full, self.person_masked, self.garment, self.mask.grid):
            record = grid.to_bytes()
            parts.append(_COUNT.pack(len(record)) + record)
        parts.append(_IDS.pack(self.garment_id, self.body_id, self.worn_garment_id))
        return b"".join(parts)


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    seed: int
    n_patterns: int
    train: List[ToyScene] = field(default_factory=list)
    test_paired: List[ToyScene] = field(default_factory=list)
    test_unpaired: List[ToyScene] = field(default_factory=list)


# ----------------------------------------------------------------------
# Procedural textures

def _coordinates(H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
    y = (np.arange(H) + 0.5) / H
    x = (np.arange(W) + 0.5) / W
    return np.meshgrid(y, x, indexing="ij")


def garment_family(garment_id: int) -> str:
    """Pattern family of a garment; families cycle with the id."""
    return GARMENT_FAMILIES[garment_id % len(GARMENT_FAMILIES)]


def garment_texture(garment_id: int, C: int, H: int, W: int) -> np.ndarray:
    """Flat-lay render of a garment, values in [−1, 1].

    The family cycles stripes → checks → blobs with the garment id; all other
    parameters come from the id's own random stream.
    """
    rng = stream(garment_id, Stream.PATTERN)
    y, x = _coordinates(H, W)
    family = garment_family(garment_id)
    if family == "stripes":
        theta = rng.uniform(0.0, math.pi)
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        pattern = np.sin(2 * math.pi * freq * (x * math.cos(theta) + y * math.sin(theta)) + phase)
    elif family == "checks":
        fy, fx = rng.integers(2, 6, size=2)
        py, px = rng.uniform(0.0, 2 * math.pi, size=2)
        pattern = np.sign(np.sin(2 * math.pi * fy * y + py) * np.sin(2 * math.pi * fx * x + px))
    else:
        pattern = np.zeros((H, W))
        for _ in range(rng.integers(3, 6)):
            cy, cx = rng.uniform(0.0, 1.0, size=2)
            width = rng.uniform(0.08, 0.2)
            sign = rng.choice([-1.0, 1.0])
            pattern += sign * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * width ** 2))
        pattern = np.clip(pattern, -1.0, 1.0)
    base = rng.uniform(-0.5, 0.5, size=C)
    amplitude = rng.uniform(0.3, 0.6, size=C)
    texture = base[:, None, None] + amplitude[:, None, None] * pattern[None]

    # Logo motif
    size = int(rng.integers(2, 5))
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    texture[:, top:top + size, left:left + size] = rng.uniform(-1.0, 1.0, size=C)[:, None, None]
    return np.clip(texture, -1.0, 1.0)


# ----------------------------------------------------------------------
# Bodies

@dataclass(frozen=True)
class BodyLayout:
    """Garment area on the person and the affine map into the flat-lay garment."""

    top: int
    left: int
    rect_h: int
    rect_w: int
    notch_h: int
    notch_w: int
    scale_y: float
    scale_x: float
    shift_y: float
    shift_x: float
    shear: float

    def mask(self, H: int, W: int) -> np.ndarray:
        values = np.zeros((H, W))
        values[self.top:self.top + self.rect_h, self.left:self.left + self.rect_w] = 1.0
        notch_left = self.left + (self.rect_w - self.notch_w) // 2
        values[self.top:self.top + self.notch_h, notch_left:notch_left + self.notch_w] = 0.0
        return values

    def warp(self, H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
        """Integer garment-grid indices (row, column) for every person pixel."""
        rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        v = (rows - self.top + 0.5) / self.rect_h
        u = (cols - self.left + 0.5) / self.rect_w
        gy = self.shift_y + self.scale_y * v
        gx = self.shift_x + self.scale_x * u + self.shear * (v - 0.5)
        gh = np.clip(np.floor(gy * H), 0, H - 1).astype(int)
        gw = np.clip(np.floor(gx * W), 0, W - 1).astype(int)
        return gh, gw


def body_layout(seed: int, body_id: int, H: int, W: int) -> BodyLayout:
    rng = stream(seed, Stream.SCENE, body_id, 0)
    rect_h = int(rng.integers(math.ceil(0.45 * H), math.floor(0.6 * H) + 1))
    rect_w = int(rng.integers(math.ceil(0.5 * W), math.floor(0.7 * W) + 1))
    scale_y, scale_x = rng.uniform(0.8, 1.0, size=2)
    return BodyLayout(
        top=int(rng.integers(1, H - rect_h + 1)),
        left=int(rng.integers(1, W - rect_w + 1)),
        rect_h=rect_h,
        rect_w=rect_w,
        notch_h=max(1, H // 10),
        notch_w=max(1, W // 5),
        scale_y=float(scale_y),
        scale_x=float(scale_x),
        shift_y=float(rng.uniform(0.0, 1.0 - scale_y)),
        shift_x=float(rng.uniform(0.0, 1.0 - scale_x)),
        shear=float(rng.uniform(-0.1, 0.1)),
    )


def body_field(seed: int, body_id: int, C: int, H: int, W: int) -> np.ndarray:
    """Smooth low-frequency person field, values in [−1, 1]."""
    rng = stream(seed, Stream.SCENE, body_id, 1)
    y, x = _coordinates(H, W)
    values = np.empty((C, H, W))
    for c in range(C):
        field_c = np.full((H, W), rng.uniform(-0.6, 0.6))
        for _ in range(2):
            fy, fx = rng.uniform(0.0, 1.5, size=2)
            phase = rng.uniform(0.0, 2 * math.pi)
            field_c += 0.3 * np.cos(2 * math.pi * (fy * y + fx * x) + phase)
        values[c] = field_c
    return np.clip(values, -1.0, 1.0)


def render_person(
    seed: int, body_id: int, garment: LatentGrid
) -> Tuple[LatentGrid, RegionMask]:
    """Dresses body `body_id` in `garment`; returns the person and its mask."""
    C, H, W = garment.shape
    layout = body_layout(seed, body_id, H, W)
    mask = layout.mask(H, W)
    gh, gw = layout.warp(H, W)
    person = body_field(seed, body_id, C, H, W)
    inside = mask == 1.0
    person[:, inside] = garment.data[:, gh[inside], gw[inside]]
    return LatentGrid(person), RegionMask.from_array(mask)


# ----------------------------------------------------------------------
# Scenes and datasets

def _scene(seed, body_id, worn_id, garment_id, params: SceneParams) -> ToyScene:
    worn = LatentGrid(garment_texture(worn_id, params.C, params.H, params.W))
    person_full, mask = render_person(seed, body_id, worn)
    garment = worn if garment_id == worn_id else LatentGrid(
        garment_texture(garment_id, params.C, params.H, params.W)
    )
    return ToyScene(
        person_full=person_full,
        person_masked=mask_zero_region(person_full, mask),
        garment=garment,
        mask=mask,
        garment_id=int(garment_id),
        body_id=int(body_id),
        worn_garment_id=int(worn_id),
    )


def gen_scene(
    seed: int, C: int = 4, H: int = 32, W: int = 24, n_patterns: int = 6, body_id: int = 0
) -> ToyScene:
    """Generates the paired scene of body `body_id` under dataset seed `seed`.

    Raises:
        InvalidConfig: If H or W < 8 or n_patterns < 2.
    """
    params = SceneParams(C=C, H=H, W=W, n_patterns=n_patterns)
    worn_id = int(stream(seed, Stream.SCENE, body_id, 2).integers(n_patterns))
    return _scene(seed, body_id, worn_id, worn_id, params)


def gen_unpaired_scene(seed: int, params: SceneParams, body_id: int) -> ToyScene:
    """A scene whose garment differs from the garment the person wears."""
    worn_id = int(stream(seed, Stream.SCENE, body_id, 2).integers(params.n_patterns))
    offset = 1 + int(stream(seed, Stream.UNPAIRED, body_id).integers(params.n_patterns - 1))
    return _scene(seed, body_id, worn_id, (worn_id + offset) % params.n_patterns, params)


def gen_dataset(
    seed: int, n_train: int, n_test: int, params: SceneParams = SceneParams()
) -> DatasetSplit:
    """Generates train, paired-test and unpaired-test scenes.

    Body ids run 0..n_train−1 for training, then continue through the test
    splits, so no body is shared between splits.

    Raises:
        InvalidConfig: If n_test is odd or a count is negative.
    """
    if n_train < 0 or n_test < 0 or n_test % 2:
        raise InvalidConfig(
            f"Need n_train >= 0 and an even n_test >= 0, got {n_train}, {n_test}."
        )
    half = n_test // 2
    train = [
        gen_scene(seed, params.C, params.H, params.W, params.n_patterns, body_id=i)
        for i in range(n_train)
    ]
    test_paired = [
        gen_scene(seed, params.C, params.H, params.W, params.n_patterns, body_id=n_train + j)
        for j in range(half)
    ]
    test_unpaired = [
        gen_unpaired_scene(seed, params, body_id=n_train + half + j) for j in range(half)
    ]
    logger.info(
        f"Generated {n_train} training, {half} paired and {half} unpaired test scenes "
        f"(seed {seed})."
    )
    return DatasetSplit(seed, params.n_patterns, train, test_paired, test_unpaired)


class OracleReconstructor:
    """Reconstructs the person by re-running the generator's own warp.

    For paired scenes this reproduces `person_full` exactly, which bounds the
    achievable loss at zero.
    """

    def __init__(self, seed: int):
        self.seed = seed

    def generate(self, scenes: List[ToyScene]) -> List[LatentGrid]:
        return [render_person(self.seed, s.body_id, s.garment)[0] for s in scenes]


# ----------------------------------------------------------------------
# Persistence

def dataset_to_bytes(split: DatasetSplit) -> bytes:
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, split.seed, split.n_patterns)]
    for scenes in (split.train, split.test_paired, split.test_unpaired):
        parts.append(_COUNT.pack(len(scenes)))
        parts.extend(scene.to_bytes() for scene in scenes)
    return b"".join(parts)


def dataset_from_bytes(buffer: bytes) -> DatasetSplit:
    """Parses a dataset file.

    Raises:
        FormatError: On a bad magic, unknown version, truncation or trailing bytes.
    """
    try:
        magic, version, seed, n_patterns = _HEADER.unpack_from(buffer, 0)
        if magic != DATASET_MAGIC:
            raise FormatError(f"Bad dataset magic {magic!r}.")
        if version != DATASET_VERSION:
            raise FormatError(f"Unsupported dataset version {version}.")
        offset = _HEADER.size
        sections = []
        for _ in range(3):
            (count,) = _COUNT.unpack_from(buffer, offset)
            offset += _COUNT.size
            scenes = []
            for _ in range(count):
                scene, offset = _read_scene(buffer, offset)
                scenes.append(scene)
            sections.append(scenes)
    except struct.error as e:
        raise FormatError(f"Truncated dataset file: {e}") from e
    if offset != len(buffer):
        raise FormatError(f"Trailing bytes after dataset: {len(buffer) - offset}.")
    return DatasetSplit(seed, n_patterns, *sections)


def _read_scene(buffer: bytes, offset: int) -> Tuple[ToyScene, int]:
    grids = []
    for _ in range(4):
        (length,) = _COUNT.unpack_from(buffer, offset)
        offset += _COUNT.size
        grid, end = read_grid(buffer, offset)
        if end - offset != length:
            raise FormatError("Grid record length does not match its prefix.")
        grids.append(grid)
        offset = end
    garment_id, body_id, worn_id = _IDS.unpack_from(buffer, offset)
    offset += _IDS.size
    person_full, person_masked, garment, mask = grids
    scene = ToyScene(
        person_full, person_masked, garment, RegionMask(mask), garment_id, body_id, worn_id
    )
    return scene, offset


def save_dataset(split: DatasetSplit, path: str | Path):
    Path(path).expanduser().write_bytes(dataset_to_bytes(split))


def load_dataset(path: str | Path) -> DatasetSplit:
    """Loads a dataset file.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: If the file content is malformed.
    """
    path = Path(path).expanduser()
    if not path.is_file():
        raise FileNotFoundError(f"Dataset not found: '{path}'")
    return dataset_from_bytes(path.read_bytes())
