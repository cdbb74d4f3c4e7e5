"""Counter-based random streams.

Every random draw of the package is addressed by coordinates, e.g.
``(seed, Stream.STEP_NOISE, scene, step)``. The coordinates are hashed into
the key of a Philox bit generator, so a stream does not depend on how many
draws other streams have made. This keeps results independent of batching,
chunking and thread scheduling.
"""

from enum import IntEnum
import numpy as np


class Stream(IntEnum):
    """Role of a random stream."""

    INIT = 1
    SCENE = 2
    PATTERN = 3
    INIT_NOISE = 4
    GARMENT_NOISE = 5
    STEP_NOISE = 6
    TIMESTEP = 7
    TRAIN_NOISE = 8
    DROPOUT = 9
    BATCH = 10
    EMBED = 11
    VALIDATION = 12
    UNPAIRED = 13


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Returns the generator addressed by ``(seed, *keys)``.

    Args:
        seed (int): Non-negative 64-bit seed.
        *keys (int): Non-negative integer coordinates, typically a Stream
                     role followed by indices.

    Returns:
        np.random.Generator: A fresh Philox-backed generator.

    Raises:
        ValueError: If the seed or a key is negative.
    """
    coordinates = [int(seed), *(int(k) for k in keys)]
    if any(c < 0 for c in coordinates):
        raise ValueError(f"Stream coordinates must be non-negative, got {coordinates}.")
    key = np.random.SeedSequence(coordinates).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
