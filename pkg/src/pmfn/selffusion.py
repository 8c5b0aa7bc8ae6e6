"""Self-fusion: neighbouring slices act as atlases that vote for the centre slice."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .imgreg import RegParams, register_deformable, warp


@dataclass(frozen=True)
class FusionParams:
    """Self-fusion settings.

    ``similarity_bandwidth`` is in intensity units; ``None`` means
    ``0.1 * (max - min)`` of the centre slice. ``distance_sigma`` (slices)
    enables an optional Gaussian taper on slice distance; off by default.
    """

    radius: int = 7
    patch_radius: int = 2
    similarity_bandwidth: float = None
    include_center: bool = True
    distance_sigma: float = None
    reg: RegParams = field(default_factory=RegParams)

    def __post_init__(self):
        if self.radius < 0:
            raise ValidationError(f"fusion radius must be >= 0, got {self.radius}")
        if self.patch_radius < 0:
            raise ValidationError(f"patch_radius must be >= 0, got {self.patch_radius}")
        if self.similarity_bandwidth is not None and not self.similarity_bandwidth > 0:
            raise ValidationError(
                f"similarity_bandwidth must be > 0, got {self.similarity_bandwidth}")
        if self.distance_sigma is not None and not self.distance_sigma > 0:
            raise ValidationError(f"distance_sigma must be > 0, got {self.distance_sigma}")


def neighbour_indices(n, center, radius):
    """Slice indices within ``radius`` of ``center``, truncated at the volume ends."""
    return list(range(max(0, center - radius), min(n, center + radius + 1)))


def patch_msd(a, b, patch_radius):
    """Mean squared difference over the ``(2p+1)^2`` patch around every pixel."""
    d = (a - b) ** 2
    if patch_radius == 0:
        return d
    return ndimage.uniform_filter(d, size=2 * patch_radius + 1, mode="nearest")


def fusion_weights(center, atlases, params, offsets=None):
    """Per-atlas voting weights ``exp(-msd / (2 h^2))``, shape ``(K, H, W)``.

    The patch distance is the mean (not the sum) of squared differences over
    the patch so the bandwidth stays in per-pixel intensity units regardless
    of patch size. Weights are rescaled per pixel by the largest weight,
    which leaves the normalised vote unchanged and avoids underflow.
    """
    h = params.similarity_bandwidth
    if h is None:
        h = 0.1 * float(np.ptp(center))
        if h == 0.0:
            h = 1.0
    logw = np.stack([-patch_msd(a, center, params.patch_radius) / (2.0 * h * h) for a in atlases])
    if params.distance_sigma is not None and offsets is not None:
        taper = -np.asarray(offsets, dtype=float) ** 2 / (2.0 * params.distance_sigma ** 2)
        logw += taper[:, None, None]
    logw -= logw.max(axis=0, keepdims=True)
    return np.exp(logw)


def self_fuse(stack, center_index, params=FusionParams(), threads=1):
    """Fuse the centre slice of ``stack`` with its registered neighbours.

    Every neighbour within ``params.radius`` is deformably registered to the
    centre slice and warped; the output is the per-pixel weighted mean of
    the warped neighbours (and the centre itself when ``include_center``).
    """
    if len(stack) == 0:
        raise ValidationError("self_fuse needs a non-empty stack")
    if not 0 <= center_index < len(stack):
        raise ValidationError(f"center_index {center_index} outside stack of {len(stack)}")
    center = np.asarray(stack[center_index], dtype=np.float64)
    idx = neighbour_indices(len(stack), center_index, params.radius)
    others = [k for k in idx if k != center_index]

    def register(k):
        moving = np.asarray(stack[k], dtype=np.float64)
        if moving.shape != center.shape:
            raise ValidationError(f"slice {k} has shape {moving.shape}, centre has {center.shape}")
        return warp(moving, register_deformable(moving, center, params.reg))

    if threads > 1 and len(others) > 1:
        with ThreadPoolExecutor(threads) as pool:
            warped = list(pool.map(register, others))
    else:
        warped = [register(k) for k in others]
    offsets = [k - center_index for k in others]
    if params.include_center:
        warped.insert(0, center)
        offsets.insert(0, 0)
    if not warped:
        raise ValidationError("no atlases to fuse: radius 0 without include_center")
    if len(warped) == 1 and params.include_center:
        return center.copy()
    atlases = np.stack(warped)
    w = fusion_weights(center, atlases, params, offsets)
    return (w * atlases).sum(axis=0) / w.sum(axis=0)


def sobel_gradient(img):
    """Gradient magnitude from the 3x3 Sobel pair, edge-replicated borders."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValidationError(f"sobel_gradient needs a 2-D image at least 3x3, got {img.shape}")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)
