"""Latent grids and the spatial duo layout.

A duo grid stacks the person region on top of the garment region along the
height axis. Rows ``[0, H)`` hold the person, rows ``[H, 2H)`` the garment.
All values are 64-bit floats stored row-major in ``(c, h, w)`` order.
"""

from dataclasses import dataclass
import functools
import struct
from typing import Tuple
import numpy as np
from .constants import GRID_MAGIC, GRID_VERSION
from .errors import FormatError, NonBinaryMask, NonFiniteValues, ShapeMismatch

_GRID_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """An immutable C×H×W grid of finite 64-bit values."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3:
            raise ShapeMismatch(f"LatentGrid needs a 3-d array, got shape {data.shape}.")
        if not np.isfinite(data).all():
            raise NonFiniteValues("LatentGrid values must be finite.")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "LatentGrid":
        return cls(np.zeros((channels, height, width)))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def equals(self, other: "LatentGrid") -> bool:
        """Bit-exact comparison of shape and values."""
        return self.shape == other.shape and self.to_bytes() == other.to_bytes()

    def to_bytes(self) -> bytes:
        """Serializes the grid: magic, version, dims as u32, then f64 data, little-endian."""
        header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, *self.shape)
        return header + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buffer: bytes) -> "LatentGrid":
        grid, end = read_grid(buffer)
        if end != len(buffer):
            raise FormatError(f"Trailing bytes after grid record: {len(buffer) - end}.")
        return grid


def read_grid(buffer: bytes, offset: int = 0) -> Tuple[LatentGrid, int]:
    """Parses a serialized grid starting at `offset`.

    Returns:
        Tuple[LatentGrid, int]: The grid and the offset just past its record.

    Raises:
        FormatError: On a bad magic, unknown version or truncated record.
    """
    if len(buffer) - offset < _GRID_HEADER.size:
        raise FormatError("Truncated grid header.")
    magic, version, c, h, w = _GRID_HEADER.unpack_from(buffer, offset)
    if magic != GRID_MAGIC:
        raise FormatError(f"Bad grid magic {magic!r}.")
    if version != GRID_VERSION:
        raise FormatError(f"Unsupported grid version {version}.")
    start = offset + _GRID_HEADER.size
    end = start + 8 * c * h * w
    if end > len(buffer):
        raise FormatError("Truncated grid payload.")
    data = np.frombuffer(buffer, dtype="<f8", count=c * h * w, offset=start)
    return LatentGrid(data.reshape(c, h, w)), end


@dataclass(frozen=True, eq=False)
class DuoGrid:
    """A grid whose rows hold the person region above the garment region."""

    grid: LatentGrid
    region_height: int

    def __post_init__(self):
        if self.grid.height != 2 * self.region_height:
            raise ShapeMismatch(
                f"Duo grid height {self.grid.height} is not twice the region "
                f"height {self.region_height}."
            )

    @classmethod
    def from_array(cls, data: np.ndarray) -> "DuoGrid":
        if data.shape[-2] % 2:
            raise ShapeMismatch(f"Duo grid needs an even height, got {data.shape[-2]}.")
        return cls(LatentGrid(data), data.shape[-2] // 2)

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    @property
    def person(self) -> LatentGrid:
        return LatentGrid(self.grid.data[:, :self.region_height])

    @property
    def garment(self) -> LatentGrid:
        return LatentGrid(self.grid.data[:, self.region_height:])

    def equals(self, other: "DuoGrid") -> bool:
        return self.region_height == other.region_height and self.grid.equals(other.grid)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """A single-channel binary mask; 1.0 marks the area to inpaint."""

    grid: LatentGrid

    def __post_init__(self):
        if self.grid.channels != 1:
            raise ShapeMismatch(f"Mask needs one channel, got {self.grid.channels}.")
        values = self.grid.data
        if not np.all((values == 0.0) | (values == 1.0)):
            raise NonBinaryMask("Mask values must be exactly 0.0 or 1.0.")

    @classmethod
    def from_array(cls, values: np.ndarray) -> "RegionMask":
        """Builds a mask from an H×W array."""
        return cls(LatentGrid(np.asarray(values, dtype=np.float64)[None]))

    @property
    def values(self) -> np.ndarray:
        """The H×W mask plane."""
        return self.grid.data[0]

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def width(self) -> int:
        return self.grid.width

    def coverage(self) -> float:
        """Fraction of the plane marked for inpainting."""
        return float(self.values.mean())


# ----------------------------------------------------------------------
# Elementwise operation support

def elementwise(func):
    """Lets an array formula accept LatentGrid or DuoGrid arguments.

    Grid arguments are unwrapped to their arrays. If the first grid argument
    is a LatentGrid or DuoGrid the result is wrapped the same way, otherwise
    the raw array is returned. Batched arrays pass through unchanged.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        template = next((a for a in args if isinstance(a, (LatentGrid, DuoGrid))), None)
        values = [a.data if isinstance(a, (LatentGrid, DuoGrid)) else a for a in args]
        result = func(*values, **kwargs)
        if isinstance(template, DuoGrid):
            return DuoGrid(LatentGrid(result), template.region_height)
        if isinstance(template, LatentGrid):
            return LatentGrid(result)
        return result

    return wrapper


def check_same_shape(*arrays: np.ndarray):
    """Raises ShapeMismatch unless all arrays share one shape."""
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise ShapeMismatch(f"Shapes differ: {sorted(shapes)}.")


# ----------------------------------------------------------------------
# Layout operations

def spatial_concat(top: LatentGrid, bottom: LatentGrid) -> DuoGrid:
    """Stacks `top` (person) above `bottom` (garment) along the height axis.

    Raises:
        ShapeMismatch: If channels, height or width differ.
    """
    if top.shape != bottom.shape:
        raise ShapeMismatch(f"Cannot concatenate {top.shape} and {bottom.shape}.")
    return DuoGrid(LatentGrid(np.concatenate([top.data, bottom.data], axis=1)), top.height)


def split_regions(x: DuoGrid) -> Tuple[LatentGrid, LatentGrid]:
    """Splits a duo grid into its person and garment halves."""
    if x.grid.height != 2 * x.region_height:
        raise ShapeMismatch(
            f"Duo grid height {x.grid.height} does not match region height {x.region_height}."
        )
    return x.person, x.garment


def mask_zero_region(z: LatentGrid, m: RegionMask) -> LatentGrid:
    """Zeroes `z` wherever the mask is 1.0, i.e. (1 − M)·z over all channels."""
    if (z.height, z.width) != (m.height, m.width):
        raise ShapeMismatch(
            f"Mask {m.height}×{m.width} does not match grid {z.height}×{z.width}."
        )
    return LatentGrid(np.where(m.values[None] == 1.0, 0.0, z.data))


def downsample_mask(m: RegionMask, factor: int) -> RegionMask:
    """Area-pools the mask by `factor` and thresholds at 0.5, ties rounding up."""
    if factor < 1 or m.height % factor or m.width % factor:
        raise ShapeMismatch(
            f"Mask {m.height}×{m.width} is not divisible by factor {factor}."
        )
    h, w = m.height // factor, m.width // factor
    pooled = m.values.reshape(h, factor, w, factor).mean(axis=(1, 3))
    return RegionMask.from_array((pooled >= 0.5).astype(np.float64))
