"""Qualitative PNG grids of try-on results."""

from pathlib import Path
from typing import Optional, Sequence
import numpy as np
from PIL import Image
from .gridcore import LatentGrid
from .toydata import ToyScene

GAP = 2


def grid_to_rgb(grid: LatentGrid) -> np.ndarray:
    """Maps channels 0-2 (channel 0 as gray if C < 3) from [−1, 1] to uint8 RGB."""
    data = grid.data
    planes = data[:3] if grid.channels >= 3 else np.repeat(data[:1], 3, axis=0)
    scaled = np.clip((planes + 1.0) * 127.5, 0.0, 255.0)
    return np.round(scaled).astype(np.uint8).transpose(1, 2, 0)


def tryon_grid_image(
    scenes: Sequence[ToyScene],
    outputs: Sequence[LatentGrid],
    scale: int = 4,
) -> Image.Image:
    """One row per scene: masked person | garment | output | ground truth."""
    if not scenes:
        raise ValueError("Need at least one scene.")
    _, h, w = scenes[0].person_full.shape
    columns = 4
    canvas = np.full(
        (len(scenes) * (h + GAP) - GAP, columns * (w + GAP) - GAP, 3), 255, dtype=np.uint8
    )
    for row, (scene, output) in enumerate(zip(scenes, outputs)):
        tiles = (scene.person_masked, scene.garment, output, scene.person_full)
        for col, tile in enumerate(tiles):
            top, left = row * (h + GAP), col * (w + GAP)
            canvas[top:top + h, left:left + w] = grid_to_rgb(tile)
    image = Image.fromarray(canvas)
    return image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)


def save_tryon_grid(
    scenes: Sequence[ToyScene],
    outputs: Sequence[LatentGrid],
    path: str | Path,
    scale: Optional[int] = 4,
) -> Path:
    path = Path(path).expanduser()
    tryon_grid_image(scenes, outputs, scale=scale).save(path, format="PNG")
    return path
