import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vamae.errors import DimensionError
from vamae.image import (
    PatchGrid,
    patchify,
    read_binary_png,
    read_png,
    unpatchify,
    validate_binary,
    validate_gray,
    write_binary_png,
    write_png,
)


def test_constant_image_patchify():
    img = np.full((4, 4), 0.5)
    grid = PatchGrid.for_image(4, 4, 2)
    patches = patchify(img, grid)
    assert patches.shape == (4, 4)
    assert np.array_equal(patches, np.full((4, 4), 0.5))


def test_single_patch_layout():
    img = np.array([[0.1, 0.2], [0.3, 0.4]])
    grid = PatchGrid.for_image(2, 2, 2)
    patches = patchify(img, grid)
    assert np.array_equal(patches, [[0.1, 0.2, 0.3, 0.4]])


def test_unpatchify_single():
    grid = PatchGrid.for_image(2, 2, 2)
    img = unpatchify(np.array([[1.0, 0.0, 0.0, 1.0]]), grid)
    assert np.array_equal(img, [[1.0, 0.0], [0.0, 1.0]])


def test_patch_block_indexing_row_major():
    # patch 1 of a 4x4/P=2 grid is the top-right 2x2 block
    img = np.zeros((4, 4))
    img[0:2, 2:4] = 1.0
    grid = PatchGrid.for_image(4, 4, 2)
    patches = patchify(img, grid)
    assert np.array_equal(patches[1], np.ones(4))
    assert patches[[0, 2, 3]].sum() == 0
    rows, cols = grid.patch_block(1)
    assert (rows, cols) == (slice(0, 2), slice(2, 4))


def test_round_trip_random_32():
    img = np.random.default_rng(7).random((32, 32))
    grid = PatchGrid.for_image(32, 32, 16)
    assert np.array_equal(unpatchify(patchify(img, grid), grid), img)


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 5),
    cols=st.integers(1, 5),
    patch=st.sampled_from([1, 2, 4]),
    seed=st.integers(0, 2**16),
)
def test_round_trip_property(rows, cols, patch, seed):
    h, w = rows * patch, cols * patch
    img = np.random.default_rng(seed).random((h, w))
    grid = PatchGrid.for_image(h, w, patch)
    assert np.array_equal(unpatchify(patchify(img, grid), grid), img)


def test_indivisible_shapes_rejected():
    with pytest.raises(DimensionError):
        PatchGrid.for_image(10, 16, 3)
    grid = PatchGrid.for_image(4, 4, 2)
    with pytest.raises(DimensionError):
        patchify(np.zeros((6, 4)), grid)
    with pytest.raises(DimensionError):
        unpatchify(np.zeros((3, 4)), grid)


def test_validators():
    with pytest.raises(ValueError):
        validate_gray(np.array([[0.0, 1.5]]))
    with pytest.raises(ValueError):
        validate_binary(np.array([[0, 2]]))
    with pytest.raises(DimensionError):
        validate_gray(np.zeros(4))
    assert validate_binary(np.array([[0, 1]])).dtype == np.uint8


def test_png_round_trip(tmp_path):
    img = np.round(np.random.default_rng(3).random((16, 16)) * 255) / 255
    path = tmp_path / "img.png"
    write_png(path, img)
    back = read_png(path)
    assert np.allclose(back, img, atol=0.5 / 255)

    mask = (img > 0.5).astype(np.uint8)
    write_binary_png(tmp_path / "mask.png", mask)
    assert np.array_equal(read_binary_png(tmp_path / "mask.png"), mask)
