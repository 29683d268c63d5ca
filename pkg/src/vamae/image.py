"""Grayscale image and patch-grid primitives.

Images are 2D numpy arrays. Grayscale images hold values in [0, 1]; binary
images hold exactly {0, 1}. The {0, 255} convention of 8-bit files appears
only at PNG I/O. Patch indexing is row-major from the top-left corner:
patch i covers rows [P*(i // cols), P*(i // cols) + P) and the analogous
column span, which fixes mask indices across runs.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from vamae.errors import DimensionError


def validate_gray(img) -> np.ndarray:
    """Check a [0,1]-valued 2D image and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected non-empty 2D image, got shape {arr.shape}")
    if np.min(arr) < 0.0 or np.max(arr) > 1.0:
        raise ValueError(
            f"gray image values outside [0, 1]: min={np.min(arr)}, max={np.max(arr)}"
        )
    return arr


def validate_binary(img) -> np.ndarray:
    """Check a {0,1}-valued 2D image and return it as uint8."""
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected non-empty 2D image, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("binary image values must be exactly 0 or 1")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class PatchGrid:
    """Partition of an H x W image into non-overlapping P x P patches."""

    patch_size: int
    rows: int
    cols: int

    @property
    def patch_count(self) -> int:
        return self.rows * self.cols

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.rows * self.patch_size, self.cols * self.patch_size)

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size < 1:
            raise DimensionError(f"patch size must be >= 1, got {patch_size}")
        if height % patch_size or width % patch_size:
            raise DimensionError(
                f"image {height}x{width} not divisible by patch size {patch_size}"
            )
        return cls(patch_size, height // patch_size, width // patch_size)

    def patch_block(self, index: int) -> tuple[slice, slice]:
        """Row/column slices of patch `index` in the image."""
        if not 0 <= index < self.patch_count:
            raise IndexError(f"patch index {index} out of range [0, {self.patch_count})")
        r, c = divmod(index, self.cols)
        p = self.patch_size
        return (slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p))


def patchify(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Split an image into (N, P*P) row-major flattened patch vectors."""
    arr = np.asarray(img)
    if arr.shape != grid.image_shape:
        raise DimensionError(
            f"image shape {arr.shape} does not match grid {grid.image_shape}"
        )
    p = grid.patch_size
    blocks = arr.reshape(grid.rows, p, grid.cols, p)
    return blocks.transpose(0, 2, 1, 3).reshape(grid.patch_count, p * p)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    arr = np.asarray(patches)
    p = grid.patch_size
    if arr.shape != (grid.patch_count, p * p):
        raise DimensionError(
            f"expected {grid.patch_count} patches of length {p * p}, got shape {arr.shape}"
        )
    blocks = arr.reshape(grid.rows, grid.cols, p, p)
    return blocks.transpose(0, 2, 1, 3).reshape(grid.image_shape)


def read_png(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as a [0,1] float image (pixel p -> p/255)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_png(path, img: np.ndarray) -> None:
    """Write a [0,1] image as 8-bit grayscale (value v -> round(v*255))."""
    arr = validate_gray(img)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def write_binary_png(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as an 8-bit PNG with values {0, 255}."""
    arr = validate_binary(mask)
    Image.fromarray(arr * np.uint8(255), mode="L").save(path, format="PNG")


def read_binary_png(path) -> np.ndarray:
    """Read an 8-bit PNG as a {0,1} mask (any value >= 128 counts as 1)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)
