"""Structure priors: vesselness, binary vessel mask, and skeleton.

Each input image yields an aligned triplet of supervision targets:

* vesselness ``V``: multi-scale tubularity response in [0, 1],
* vessel mask ``V_bin``: ``V`` thresholded at 0.7x its Otsu threshold,
* skeleton ``S``: Zhang-Suen thinning of ``V_bin``.

Tubularity follows the classic Hessian-eigenvalue recipe: at scale sigma the
image is convolved with sampled Gaussian-derivative kernels (scale-normalized
by sigma^2), the 2x2 Hessian eigenvalues are ordered by magnitude
|l1| <= |l2|, and bright ridges respond with

    exp(-(l1/l2)^2 / (2 beta^2)) * (1 - exp(-(l1^2 + l2^2) / (2 c^2)))

wherever l2 < 0. Convolution uses mirror (reflect-without-edge-repeat)
boundaries so borders do not leak dark artifacts into patch statistics.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from vamae.errors import DegenerateImageError
from vamae.image import validate_binary, validate_gray
from vamae.thinning import zhang_suen_thin

DEFAULT_SCALES = (0.5, 1.0, 1.5, 2.0, 2.5)
OTSU_BINS = 256
VESSEL_THRESHOLD_FACTOR = 0.7


@dataclass(frozen=True)
class FrangiParams:
    """Tubularity filter parameters.

    `c=None` adapts the structureness cutoff per image and scale to half the
    maximum Frobenius norm of the Hessian field, which suits unit-normalized
    inputs; `bright_vessels` selects bright-on-dark ridges.
    """

    scales: tuple[float, ...] = DEFAULT_SCALES
    beta: float = 0.5
    c: float | None = None
    bright_vessels: bool = True

    def __post_init__(self):
        if len(self.scales) == 0 or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be non-empty and positive, got {self.scales}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.c is not None and self.c <= 0:
            raise ValueError(f"c must be > 0 when given, got {self.c}")


@dataclass(frozen=True)
class StructureTriplet:
    """Aligned (intensity, vesselness, vessel mask, skeleton) for one image."""

    intensity: np.ndarray
    vesselness: np.ndarray
    vessel_mask: np.ndarray
    skeleton: np.ndarray

    def __post_init__(self):
        shapes = {
            self.intensity.shape,
            self.vesselness.shape,
            self.vessel_mask.shape,
            self.skeleton.shape,
        }
        if len(shapes) != 1:
            raise ValueError(f"triplet fields have mismatched shapes: {shapes}")
        if np.any(self.skeleton > self.vessel_mask):
            raise ValueError("skeleton must be a subset of the vessel mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape


def gaussian_derivative_kernel(sigma: float, order: int) -> np.ndarray:
    """Sampled analytic Gaussian derivative, truncated at 4 sigma.

    order 0: g, order 1: g', order 2: g''. Odd-length, centered. The
    smoothing kernel is normalized to unit sum and the derivative kernels
    are mean-corrected to a vanishing zeroth moment, so constant inputs
    respond exactly zero despite truncation.
    """
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2)) / (math.sqrt(2.0 * math.pi) * sigma)
    if order == 0:
        return g / g.sum()
    if order == 1:
        k = -x / sigma**2 * g
    elif order == 2:
        k = (x**2 - sigma**2) / sigma**4 * g
    else:
        raise ValueError(f"unsupported derivative order {order}")
    return k - k.mean()


def hessian_at_scale(img: np.ndarray, sigma: float):
    """Scale-normalized second Gaussian derivatives (H_xx, H_xy, H_yy).

    x is the column axis, y the row axis. Each field is multiplied by
    sigma^2 so responses are comparable across scales.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    arr = np.asarray(img, dtype=np.float64)
    g0 = gaussian_derivative_kernel(sigma, 0)
    g1 = gaussian_derivative_kernel(sigma, 1)
    g2 = gaussian_derivative_kernel(sigma, 2)

    def sep(image, kern_x, kern_y):
        out = convolve1d(image, kern_x, axis=1, mode="mirror")
        return convolve1d(out, kern_y, axis=0, mode="mirror")

    s2 = sigma**2
    h_xx = s2 * sep(arr, g2, g0)
    h_xy = s2 * sep(arr, g1, g1)
    h_yy = s2 * sep(arr, g0, g2)
    return h_xx, h_xy, h_yy


def _hessian_eigenvalues(h_xx, h_xy, h_yy):
    """Per-pixel eigenvalues ordered by magnitude: |l1| <= |l2|."""
    half_trace = 0.5 * (h_xx + h_yy)
    root = np.sqrt((0.5 * (h_xx - h_yy)) ** 2 + h_xy**2)
    e_lo = half_trace - root
    e_hi = half_trace + root
    swap = np.abs(e_lo) > np.abs(e_hi)
    l1 = np.where(swap, e_hi, e_lo)
    l2 = np.where(swap, e_lo, e_hi)
    return l1, l2


def _vesselness_from_eigenvalues(l1, l2, params: FrangiParams):
    structureness = np.sqrt(l1**2 + l2**2)
    c = params.c
    if c is None:
        s_max = float(structureness.max())
        if s_max == 0.0:
            return np.zeros_like(l1)
        c = 0.5 * s_max
    # blobness ratio; pixels with l2 == 0 are zeroed below, guard the division
    with np.errstate(divide="ignore", invalid="ignore"):
        rb2 = np.where(l2 != 0.0, (l1 / np.where(l2 == 0.0, 1.0, l2)) ** 2, 0.0)
    response = np.exp(-rb2 / (2.0 * params.beta**2)) * (
        1.0 - np.exp(-(structureness**2) / (2.0 * c**2))
    )
    ridge_sign = l2 < 0.0 if params.bright_vessels else l2 > 0.0
    return np.where(ridge_sign, response, 0.0)


def frangi_single_scale(
    img: np.ndarray, sigma: float, params: FrangiParams | None = None
) -> np.ndarray:
    """Tubularity response at one scale, in [0, 1)."""
    params = params or FrangiParams()
    l1, l2 = _hessian_eigenvalues(*hessian_at_scale(img, sigma))
    return _vesselness_from_eigenvalues(l1, l2, params)


def frangi_multiscale(img: np.ndarray, params: FrangiParams | None = None) -> np.ndarray:
    """Pixelwise max over scales, min-max normalized to [0, 1].

    A response that is identically zero (e.g. constant input) stays all-zero.
    """
    params = params or FrangiParams()
    arr = validate_gray(img)
    best = np.zeros_like(arr)
    for sigma in params.scales:
        np.maximum(best, frangi_single_scale(arr, sigma, params), out=best)
    lo, hi = float(best.min()), float(best.max())
    if hi <= lo:
        return np.zeros_like(best)
    return (best - lo) / (hi - lo)


def otsu_threshold(img: np.ndarray) -> float:
    """Threshold in [0, 1] maximizing between-class variance on 256 bins.

    Candidate t puts bins 0..t in the low class and t+1..255 in the high
    class; ties resolve to the lowest t. The returned value is the lower
    edge (t+1)/256 of the first high-class bin, so `v >= threshold` matches
    the binwise split.
    """
    arr = np.asarray(img, dtype=np.float64)
    values = arr.ravel()
    if values.size == 0 or np.all(values == values[0]):
        raise DegenerateImageError("all pixels equal; Otsu threshold undefined")
    bins = np.clip(np.floor(values * OTSU_BINS).astype(np.int64), 0, OTSU_BINS - 1)
    counts = np.bincount(bins, minlength=OTSU_BINS).astype(np.float64)

    total = counts.sum()
    weights = counts / total
    centers = np.arange(OTSU_BINS, dtype=np.float64)
    cum_w = np.cumsum(weights)
    cum_mu = np.cumsum(weights * centers)
    mu_total = cum_mu[-1]

    w0 = cum_w[:-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(valid, cum_mu[:-1] / w0, 0.0)
        mu1 = np.where(valid, (mu_total - cum_mu[:-1]) / w1, 0.0)
    var_between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, 0.0)
    t = int(np.argmax(var_between))  # argmax takes the lowest index on ties
    return (t + 1) / OTSU_BINS


def binarize_vessels(vesselness: np.ndarray) -> np.ndarray:
    """Binary vessel mask: pixel is 1 iff V >= 0.7 * Otsu(V)."""
    arr = validate_gray(vesselness)
    threshold = VESSEL_THRESHOLD_FACTOR * otsu_threshold(arr)
    return (arr >= threshold).astype(np.uint8)


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """1-pixel-wide centerlines via iterative Zhang-Suen thinning."""
    arr = validate_binary(mask)
    return zhang_suen_thin(arr)


def compute_triplet(img: np.ndarray, params: FrangiParams | None = None) -> StructureTriplet:
    """Full prior extraction for one image.

    Degenerate vesselness (constant map, Otsu undefined) yields empty mask
    and skeleton rather than an error, so flat images pass through pipelines.
    """
    intensity = validate_gray(img)
    vesselness = frangi_multiscale(intensity, params)
    try:
        vessel_mask = binarize_vessels(vesselness)
    except DegenerateImageError:
        vessel_mask = np.zeros(vesselness.shape, dtype=np.uint8)
    skeleton = skeletonize(vessel_mask)
    return StructureTriplet(intensity, vesselness, vessel_mask, skeleton)
