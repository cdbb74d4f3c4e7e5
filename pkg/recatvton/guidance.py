"""Denoiser input assembly and classifier-free guidance.

A model input stacks three duo-shaped planes channel-wise: the noisy duo
latent (C channels), the mask channel (person rows carry the mask, garment
rows are zero) and the condition duo (masked person above clean garment).
"""

from dataclasses import dataclass
from enum import Enum
import math
import numpy as np
from .errors import InvalidConfig, ShapeMismatch
from .gridcore import (
    check_same_shape, DuoGrid, elementwise, LatentGrid, RegionMask, spatial_concat
)


class ConditioningVariant(str, Enum):
    """How the unconditional branch removes garment information.

    CATVTON drops only the clean garment of the condition duo. RECATVTON also
    zeroes the noisy garment rows, so nothing garment-related remains.
    """

    CATVTON = "catvton"
    RECATVTON = "recatvton"


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 2.5
    variant: ConditioningVariant = ConditioningVariant.RECATVTON

    def __post_init__(self):
        if not math.isfinite(self.omega) or self.omega < 0:
            raise InvalidConfig(f"Guidance scale must be finite and >= 0, got {self.omega}.")
        object.__setattr__(self, "variant", ConditioningVariant(self.variant))


@dataclass(frozen=True, eq=False)
class ModelInput:
    """The (2C+1)-channel duo input of the denoiser."""

    grid: LatentGrid
    latent_channels: int

    def __post_init__(self):
        c = self.latent_channels
        if self.grid.channels != 2 * c + 1:
            raise ShapeMismatch(
                f"Model input needs {2 * c + 1} channels, got {self.grid.channels}."
            )
        if self.grid.height % 2:
            raise ShapeMismatch(f"Model input height must be even, got {self.grid.height}.")
        if np.any(self.grid.data[c, self.region_height:] != 0.0):
            raise ShapeMismatch("Mask channel must be zero on the garment rows.")

    @property
    def region_height(self) -> int:
        return self.grid.height // 2

    @property
    def noisy(self) -> DuoGrid:
        return DuoGrid(LatentGrid(self.grid.data[:self.latent_channels]), self.region_height)

    @property
    def mask_channel(self) -> LatentGrid:
        c = self.latent_channels
        return LatentGrid(self.grid.data[c:c + 1])

    @property
    def condition(self) -> DuoGrid:
        return DuoGrid(
            LatentGrid(self.grid.data[self.latent_channels + 1:]), self.region_height
        )


def _as_mask(mask) -> RegionMask:
    return mask if isinstance(mask, RegionMask) else RegionMask(mask)


def _stack(noisy: np.ndarray, mask: RegionMask, condition: np.ndarray) -> ModelInput:
    c = noisy.shape[0]
    mask_plane = np.concatenate([mask.grid.data, np.zeros_like(mask.grid.data)], axis=1)
    data = np.concatenate([noisy, mask_plane, condition], axis=0)
    return ModelInput(LatentGrid(data), c)


def _check_inputs(zt_duo: DuoGrid, mask: RegionMask, zp0_masked: LatentGrid):
    person = zt_duo.person
    check_same_shape(person.data, zp0_masked.data)
    if (mask.height, mask.width) != (person.height, person.width):
        raise ShapeMismatch(
            f"Mask {mask.height}×{mask.width} does not match region "
            f"{person.height}×{person.width}."
        )


def assemble_conditional_input(
    zt_duo: DuoGrid, mask, zp0_masked: LatentGrid, zg0: LatentGrid
) -> ModelInput:
    """Builds X_t = Concat_ch(z^p_t ⊙ z^g_t, M ⊙ 0, z^p_0 ⊙ z^g_0).

    Args:
        zt_duo (DuoGrid): Noisy person above noisy garment.
        mask (RegionMask | LatentGrid): Inpainting mask at latent resolution.
        zp0_masked (LatentGrid): Person latent with the mask area already zeroed.
        zg0 (LatentGrid): Clean garment latent.

    Raises:
        ShapeMismatch: On inconsistent shapes.
        NonBinaryMask: If a mask grid holds non-binary values.
    """
    mask = _as_mask(mask)
    _check_inputs(zt_duo, mask, zp0_masked)
    condition = spatial_concat(zp0_masked, zg0)
    return _stack(zt_duo.data, mask, condition.data)


def assemble_unconditional_input(
    variant, zt_duo: DuoGrid, mask, zp0_masked: LatentGrid
) -> ModelInput:
    """Builds the unconditional input of the given variant.

    The clean garment is not an argument: neither variant may see it. CATVTON
    keeps the noisy garment rows; RECATVTON zeroes them as well, so its input
    depends on the person latents and the mask only.
    """
    variant = ConditioningVariant(variant)
    mask = _as_mask(mask)
    _check_inputs(zt_duo, mask, zp0_masked)
    h = zt_duo.region_height
    condition = np.zeros_like(zt_duo.data)
    condition[:, :h] = zp0_masked.data
    noisy = zt_duo.data
    if variant is ConditioningVariant.RECATVTON:
        noisy = noisy.copy()
        noisy[:, h:] = 0.0
    return _stack(noisy, mask, condition)


@elementwise
def cfg_combine(eps_cond, eps_uncond, omega: float):
    """Classifier-free guidance eps_u + omega·(eps_c − eps_u).

    Evaluated as omega·eps_c + (1 − omega)·eps_u, which returns eps_c exactly
    for omega = 1 and eps_u exactly for omega = 0.
    """
    check_same_shape(eps_cond, eps_uncond)
    if not math.isfinite(omega):
        raise InvalidConfig(f"Guidance scale must be finite, got {omega}.")
    return omega * eps_cond + (1.0 - omega) * eps_uncond
