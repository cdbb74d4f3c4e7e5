"""Unit tests for latent grids, the duo layout and mask helpers."""

import numpy as np
import pytest
from recatvton.errors import FormatError, NonBinaryMask, NonFiniteValues, ShapeMismatch
from recatvton.gridcore import (
    downsample_mask,
    DuoGrid,
    LatentGrid,
    mask_zero_region,
    RegionMask,
    spatial_concat,
    split_regions
)


def test_latent_grid_is_read_only():
    grid = LatentGrid(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        grid.data[0, 0, 0] = 1.0


def test_latent_grid_rejects_bad_input():
    with pytest.raises(ShapeMismatch):
        LatentGrid(np.zeros((2, 2)))
    with pytest.raises(NonFiniteValues):
        LatentGrid(np.array([[[np.nan]]]))


def test_spatial_concat_ones_over_zeros():
    duo = spatial_concat(LatentGrid(np.ones((1, 2, 2))), LatentGrid(np.zeros((1, 2, 2))))
    assert duo.data.shape == (1, 4, 2)
    assert duo.region_height == 2
    assert np.all(duo.data[:, :2] == 1.0)
    assert np.all(duo.data[:, 2:] == 0.0)


def test_spatial_concat_index_layout():
    rng = np.random.default_rng(1)
    top = LatentGrid(rng.normal(size=(4, 3, 2)))
    bottom = LatentGrid(rng.normal(size=(4, 3, 2)))
    duo = spatial_concat(top, bottom)
    for c in range(4):
        for h in range(6):
            for w in range(2):
                expected = top.data[c, h, w] if h < 3 else bottom.data[c, h - 3, w]
                assert duo.data[c, h, w] == expected


def test_spatial_concat_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        spatial_concat(LatentGrid(np.zeros((1, 2, 2))), LatentGrid(np.zeros((1, 2, 3))))


def test_split_regions_inverts_concat():
    rng = np.random.default_rng(2)
    top = LatentGrid(rng.normal(size=(4, 32, 24)))
    bottom = LatentGrid(rng.normal(size=(4, 32, 24)))
    person, garment = split_regions(spatial_concat(top, bottom))
    assert person.equals(top)
    assert garment.equals(bottom)


def test_split_constant_duo():
    person, garment = split_regions(DuoGrid.from_array(np.full((4, 64, 24), 0.25)))
    assert person.shape == garment.shape == (4, 32, 24)
    assert np.all(person.data == 0.25) and np.all(garment.data == 0.25)


def test_duo_grid_requires_even_height():
    with pytest.raises(ShapeMismatch):
        DuoGrid.from_array(np.zeros((1, 3, 2)))
    with pytest.raises(ShapeMismatch):
        DuoGrid(LatentGrid(np.zeros((1, 4, 2))), 3)


def test_mask_zero_region():
    rng = np.random.default_rng(3)
    z = LatentGrid(rng.normal(size=(3, 4, 6)))
    assert mask_zero_region(z, RegionMask.from_array(np.zeros((4, 6)))).equals(z)
    assert np.all(mask_zero_region(z, RegionMask.from_array(np.ones((4, 6)))).data == 0.0)

    checker = (np.indices((4, 6)).sum(axis=0) % 2).astype(float)
    out = mask_zero_region(z, RegionMask.from_array(checker)).data
    assert np.all(out[:, checker == 1.0] == 0.0)
    assert np.array_equal(out[:, checker == 0.0], z.data[:, checker == 0.0])


def test_mask_zero_region_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mask_zero_region(LatentGrid(np.zeros((1, 4, 4))), RegionMask.from_array(np.zeros((4, 6))))


def test_region_mask_must_be_binary():
    with pytest.raises(NonBinaryMask):
        RegionMask.from_array(np.full((2, 2), 0.5))


def test_downsample_mask():
    rng = np.random.default_rng(4)
    m = RegionMask.from_array((rng.random((4, 6)) < 0.5).astype(float))
    assert downsample_mask(m, 1).grid.equals(m.grid)
    three_of_four = RegionMask.from_array(np.array([[1.0, 1.0], [1.0, 0.0]]))
    assert downsample_mask(three_of_four, 2).values[0, 0] == 1.0
    tie = RegionMask.from_array(np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert downsample_mask(tie, 2).values[0, 0] == 1.0
    one_of_four = RegionMask.from_array(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert downsample_mask(one_of_four, 2).values[0, 0] == 0.0


def test_downsample_mask_indivisible():
    with pytest.raises(ShapeMismatch):
        downsample_mask(RegionMask.from_array(np.zeros((3, 4))), 2)


def test_grid_bytes_round_trip_and_errors():
    grid = LatentGrid(np.arange(24, dtype=float).reshape(2, 3, 4))
    buffer = grid.to_bytes()
    assert LatentGrid.from_bytes(buffer).equals(grid)
    with pytest.raises(FormatError):
        LatentGrid.from_bytes(buffer[:-1])
    with pytest.raises(FormatError):
        LatentGrid.from_bytes(b"XXXX" + buffer[4:])
    with pytest.raises(FormatError):
        LatentGrid.from_bytes(buffer + b"\x00")


def test_mask_zero_region_is_idempotent():
    rng = np.random.default_rng(7)
    z = LatentGrid(rng.normal(size=(2, 6, 4)))
    m = RegionMask.from_array((rng.random((6, 4)) < 0.4).astype(float))
    once = mask_zero_region(z, m)
    assert mask_zero_region(once, m).equals(once)


@pytest.mark.parametrize("factor", [1, 2, 3, 6])
def test_downsample_mask_stays_binary(factor):
    rng = np.random.default_rng(factor)
    for density in (0.1, 0.5, 0.9):
        m = RegionMask.from_array((rng.random((12, 18)) < density).astype(float))
        values = downsample_mask(m, factor).values
        assert values.shape == (12 // factor, 18 // factor)
        assert set(np.unique(values)) <= {0.0, 1.0}
