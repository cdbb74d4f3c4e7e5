"""Unit tests for denoiser input assembly and classifier-free guidance."""

import numpy as np
import pytest
from recatvton.denoiser import DenoiserInputSpec, TinyUNet, TinyUNetConfig
from recatvton.errors import InvalidConfig, ShapeMismatch
from recatvton.gridcore import LatentGrid, RegionMask, spatial_concat
from recatvton.guidance import (
    assemble_conditional_input,
    assemble_unconditional_input,
    cfg_combine,
    ConditioningVariant,
    GuidanceConfig
)


@pytest.fixture
def parts():
    rng = np.random.default_rng(0)
    C, H, W = 2, 4, 6
    zt = spatial_concat(LatentGrid(rng.normal(size=(C, H, W))),
                        LatentGrid(rng.normal(size=(C, H, W))))
    mask = RegionMask.from_array((rng.random((H, W)) < 0.5).astype(float))
    zp0_masked = LatentGrid(np.where(mask.values == 1.0, 0.0, rng.normal(size=(C, H, W))))
    zg0 = LatentGrid(rng.normal(size=(C, H, W)))
    return zt, mask, zp0_masked, zg0


def test_conditional_input_shape():
    C, H, W = 4, 32, 24
    zeros = LatentGrid.zeros(C, H, W)
    x = assemble_conditional_input(
        spatial_concat(zeros, zeros), RegionMask.from_array(np.zeros((H, W))), zeros, zeros
    )
    assert x.grid.shape == (9, 64, 24)
    assert np.all(x.grid.data == 0.0)


def test_conditional_input_layout(parts):
    zt, mask, zp0_masked, zg0 = parts
    x = assemble_conditional_input(zt, mask, zp0_masked, zg0)
    assert x.noisy.equals(zt)
    assert np.array_equal(x.mask_channel.data[0, :4], mask.values)
    assert np.all(x.mask_channel.data[0, 4:] == 0.0)
    assert x.condition.person.equals(zp0_masked)
    assert x.condition.garment.equals(zg0)


def test_catvton_unconditional_drops_clean_garment_only(parts):
    zt, mask, zp0_masked, zg0 = parts
    cond = assemble_conditional_input(zt, mask, zp0_masked, zg0).grid.data
    uncond = assemble_unconditional_input("catvton", zt, mask, zp0_masked).grid.data
    expected = cond.copy()
    expected[3:, 4:] = 0.0
    assert np.array_equal(uncond, expected)


def test_recatvton_unconditional_drops_all_garment_rows(parts):
    zt, mask, zp0_masked, zg0 = parts
    cond = assemble_conditional_input(zt, mask, zp0_masked, zg0).grid.data
    uncond = assemble_unconditional_input(
        ConditioningVariant.RECATVTON, zt, mask, zp0_masked
    ).grid.data
    expected = cond.copy()
    expected[:, 4:] = 0.0
    assert np.array_equal(uncond, expected)


def test_recatvton_unconditional_ignores_noisy_garment(parts):
    zt, mask, zp0_masked, _ = parts
    other = spatial_concat(zt.person, LatentGrid(np.full(zt.garment.shape, 7.0)))
    a = assemble_unconditional_input("recatvton", zt, mask, zp0_masked)
    b = assemble_unconditional_input("recatvton", other, mask, zp0_masked)
    assert a.grid.equals(b.grid)


def test_input_assembly_rejects_mismatched_mask(parts):
    zt, _, zp0_masked, zg0 = parts
    with pytest.raises(ShapeMismatch):
        assemble_conditional_input(zt, RegionMask.from_array(np.zeros((4, 5))), zp0_masked, zg0)
    with pytest.raises(ShapeMismatch):
        assemble_unconditional_input(
            "catvton", zt, RegionMask.from_array(np.zeros((3, 6))), zp0_masked
        )


def test_unknown_variant():
    with pytest.raises(ValueError):
        ConditioningVariant("uncond")


def test_cfg_combine():
    rng = np.random.default_rng(1)
    eps_c, eps_u = rng.normal(size=5), rng.normal(size=5)
    assert np.array_equal(cfg_combine(eps_c, eps_u, 1.0), eps_c)
    assert np.array_equal(cfg_combine(eps_c, eps_u, 0.0), eps_u)
    assert cfg_combine(np.array(1.0), np.array(0.0), 2.5) == pytest.approx(2.5)
    with pytest.raises(InvalidConfig):
        cfg_combine(eps_c, eps_u, float("inf"))
    with pytest.raises(ShapeMismatch):
        cfg_combine(eps_c, eps_u[:3], 2.0)


def test_guidance_config():
    assert GuidanceConfig().omega == 2.5
    assert GuidanceConfig(variant="catvton").variant is ConditioningVariant.CATVTON
    with pytest.raises(InvalidConfig):
        GuidanceConfig(omega=-1.0)


@pytest.mark.parametrize("variant, independent", [("recatvton", True), ("catvton", False)])
def test_unconditional_person_prediction_and_noisy_garment(parts, variant, independent):
    zt, mask, zp0_masked, zg0 = parts
    spec = DenoiserInputSpec(latent_channels=2, region_height=4, width=6)
    net = TinyUNet(TinyUNetConfig(spec, features=4, groups=2, T=20))
    params = net.init_params(0)
    other = spatial_concat(zt.person, zg0)
    x = np.stack([
        assemble_unconditional_input(variant, duo, mask, zp0_masked).grid.data
        for duo in (zt, other)
    ])
    out, _ = net.forward(params, x, np.array([7, 7]))
    assert np.array_equal(out[0, :, :4], out[1, :, :4]) == independent
