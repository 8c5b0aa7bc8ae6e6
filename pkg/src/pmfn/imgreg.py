"""Rigid and deformable registration of 2-D images.

Conventions
-----------
A :class:`Translation` ``(dx, dy)`` moves image content ``dx`` columns to the
right and ``dy`` rows down: ``shift(img, t)[y, x] == img[y - dy, x - dx]``.
``register_rigid(moving, fixed)`` returns ``t`` with ``moving ~ shift(fixed, t)``,
so ``shift(moving, -t)`` aligns the moving image onto the fixed one.

A :class:`DeformationField` is a backward (pull) map:
``warp(img, field)[y, x] == img[y + v[y, x], x + u[y, x]]`` with bilinear
interpolation and clamped borders. ``register_deformable(moving, fixed)``
returns the field with ``warp(moving, field) ~ fixed``.
"""

from dataclasses import dataclass, field as dc_field
import json
import math

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, ValidationError
from .pfm import read_pfm, write_pfm


@dataclass(frozen=True)
class Translation:
    dx: float = 0.0
    dy: float = 0.0

    def __neg__(self):
        return Translation(-self.dx, -self.dy)

    def as_tuple(self):
        return (self.dx, self.dy)


@dataclass
class DeformationField:
    u: np.ndarray  # column displacement (px)
    v: np.ndarray  # row displacement (px)
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValidationError(
                f"field components must be equal 2-D shapes, got {self.u.shape} and {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValidationError("deformation field contains non-finite values")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    def magnitude(self):
        return np.hypot(self.u, self.v)

    def save(self, stem):
        """Write ``<stem>_u.pfm``, ``<stem>_v.pfm`` and ``<stem>.json``."""
        write_pfm(f"{stem}_u.pfm", self.u)
        write_pfm(f"{stem}_v.pfm", self.v)
        with open(f"{stem}.json", "w") as f:
            json.dump({"shape": list(self.shape), "meta": self.meta}, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, stem):
        with open(f"{stem}.json") as f:
            header = json.load(f)
        return cls(read_pfm(f"{stem}_u.pfm"), read_pfm(f"{stem}_v.pfm"), header.get("meta", {}))


@dataclass(frozen=True)
class RegParams:
    pyramid_levels: int = 3
    iterations_per_level: int = 40
    smoothing_sigma_update: float = 1.0
    smoothing_sigma_field: float = 1.5
    step_scale: float = 1.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValidationError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        for name in ("iterations_per_level", "smoothing_sigma_update",
                     "smoothing_sigma_field", "step_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"RegParams.{name} must be positive, got {getattr(self, name)}")


def _as_image(img, name="image"):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {img.shape}")
    return img


def _check_pair(moving, fixed):
    moving = _as_image(moving, "moving")
    fixed = _as_image(fixed, "fixed")
    if moving.shape != fixed.shape:
        raise ValidationError(f"shape mismatch: moving {moving.shape} vs fixed {fixed.shape}")
    return moving, fixed


def warp(img, field):
    """Resample ``img`` at ``(y + v, x + u)`` with bilinear interpolation."""
    img = _as_image(img)
    if field.shape != img.shape:
        raise ValidationError(f"field shape {field.shape} does not match image {img.shape}")
    if not (field.u.any() or field.v.any()):
        return img.copy()
    rows, cols = np.indices(img.shape, dtype=np.float64)
    return ndimage.map_coordinates(img, [rows + field.v, cols + field.u], order=1, mode="nearest")


def shift(img, t):
    """Translate ``img`` by ``t`` (content moves by ``+t``), clamping at the border."""
    img = _as_image(img)
    if isinstance(t, tuple):
        t = Translation(*t)
    if t.dx == 0 and t.dy == 0:
        return img.copy()
    if float(t.dx).is_integer() and float(t.dy).is_integer():
        h, w = img.shape
        ri = np.clip(np.arange(h) - int(t.dy), 0, h - 1)
        ci = np.clip(np.arange(w) - int(t.dx), 0, w - 1)
        return img[np.ix_(ri, ci)]
    return ndimage.shift(img, (t.dy, t.dx), order=1, mode="nearest")


def _ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if denom == 0.0:
        return -1.0
    return float((a * b).sum()) / denom


def _overlap_ncc(moving, fixed, dx, dy):
    # moving ~ shift(fixed, (dx, dy)): moving[y, x] pairs with fixed[y - dy, x - dx]
    h, w = fixed.shape
    m = moving[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)]
    f = fixed[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return _ncc(m, f)


def _parabolic_offset(left, center, right):
    denom = left - 2.0 * center + right
    if denom >= 0.0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def rigid_prefilter(img, band=(1.0, 4.0), log=True):
    """Log-compress then band-pass an image for correlation.

    The log turns multiplicative speckle into additive noise; the
    difference of Gaussians keeps edges and vessels and drops the slowly
    varying layer profile that otherwise dominates the correlation.
    """
    img = np.asarray(img, dtype=np.float64)
    if log:
        lo, span = float(img.min()), float(np.ptp(img))
        img = np.log(img - lo + 0.01 * (span if span > 0 else 1.0))
    fine, coarse = band
    out = ndimage.gaussian_filter(img, fine, mode="nearest") if fine > 0 else img
    if coarse:
        out = out - ndimage.gaussian_filter(img, coarse, mode="nearest")
    return out


def register_rigid(moving, fixed, bound=16, band=(1.0, 4.0), log=True):
    """Estimate the translation taking ``fixed`` onto ``moving``.

    Exhaustive search of the normalized cross-correlation over the overlap
    of every integer shift with ``|dx|, |dy| <= bound``, followed by a
    per-axis quadratic fit through the peak and its two neighbours. Both
    images pass through :func:`rigid_prefilter` first; ``band=(0, 0)`` with
    ``log=False`` correlates the raw intensities.
    """
    moving, fixed = _check_pair(moving, fixed)
    h, w = fixed.shape
    bound = int(bound)
    if bound < 0 or bound > min(h, w) // 2:
        raise ValidationError(
            f"rigid search bound {bound} must lie in [0, {min(h, w) // 2}] for a {h}x{w} image")
    if np.ptp(moving) == 0 or np.ptp(fixed) == 0:
        raise DegenerateInputError("rigid registration needs non-constant images")
    moving = rigid_prefilter(moving, band, log)
    fixed = rigid_prefilter(fixed, band, log)

    n = 2 * bound + 1
    scores = np.full((n, n), -np.inf)
    for iy, dy in enumerate(range(-bound, bound + 1)):
        for ix, dx in enumerate(range(-bound, bound + 1)):
            scores[iy, ix] = _overlap_ncc(moving, fixed, dx, dy)
    iy, ix = np.unravel_index(int(np.argmax(scores)), scores.shape)
    dy, dx = float(iy - bound), float(ix - bound)
    if 0 < ix < n - 1:
        dx += _parabolic_offset(scores[iy, ix - 1], scores[iy, ix], scores[iy, ix + 1])
    if 0 < iy < n - 1:
        dy += _parabolic_offset(scores[iy - 1, ix], scores[iy, ix], scores[iy + 1, ix])
    return Translation(dx, dy)


def _ssd(a, b):
    d = a - b
    return float((d * d).sum())


def _laplacian_l1_of_gaussian(sigma):
    """l1 norm of the discrete Laplacian applied to the sampled Gaussian kernel."""
    radius = int(4.0 * sigma + 0.5) + 1
    delta = np.zeros((2 * radius + 1,) * 2)
    delta[radius, radius] = 1.0
    g = ndimage.gaussian_filter(delta, sigma, mode="constant")
    return float(np.abs(ndimage.laplace(g, mode="constant")).sum())


def _downsample(img):
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def _upsample_field(u, v, shape):
    zoom = (shape[0] / u.shape[0], shape[1] / u.shape[1])
    up = [ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) * 2.0 for c in (u, v)]
    out = []
    for c in up:
        c = c[:shape[0], :shape[1]]
        pad = ((0, shape[0] - c.shape[0]), (0, shape[1] - c.shape[1]))
        out.append(np.pad(c, pad, mode="edge"))
    return out


def register_deformable(moving, fixed, params=RegParams()):
    """Coarse-to-fine demons registration of ``moving`` onto ``fixed``.

    Each iteration computes the symmetric demons force
    ``-(w - f) * grad / (|grad|^2 + (w - f)^2)``, smooths it with
    ``smoothing_sigma_update``, adds it to the field and smooths the field
    with ``smoothing_sigma_field``. The field with the lowest full-resolution
    SSD seen on the finest level is returned (the zero field is always a
    candidate), so the SSD after registration never exceeds the SSD before.

    ``meta`` records ``ssd_before``, ``ssd_after``, ``max_laplacian`` (over
    pixels further than the smoothing support from the border) and the
    matching analytic ``laplacian_bound``.
    """
    moving, fixed = _check_pair(moving, fixed)
    p = params
    scale = float(max(np.ptp(fixed), np.ptp(moving)))
    if scale == 0.0:
        scale = 1.0

    pyramid = [(moving, fixed)]
    for _ in range(p.pyramid_levels - 1):
        m, f = pyramid[-1]
        if min(m.shape) < 8:
            break
        pyramid.append((_downsample(m), _downsample(f)))

    def smooth(c, sigma):
        return ndimage.gaussian_filter(c, sigma, mode="nearest")

    u = v = None
    best = None
    ssd0 = _ssd(moving, fixed)
    for level in range(len(pyramid) - 1, -1, -1):
        m, f = pyramid[level]
        if u is None:
            u, v = np.zeros(m.shape), np.zeros(m.shape)
        else:
            u, v = _upsample_field(u, v, m.shape)
        # the field entering the level is itself smoothed so every candidate is G * h
        h_max = float(max(np.abs(u).max(), np.abs(v).max()))
        u, v = smooth(u, p.smoothing_sigma_field), smooth(v, p.smoothing_sigma_field)
        gfy, gfx = np.gradient(f)
        finest = level == 0
        if finest:
            best = (ssd0, np.zeros(m.shape), np.zeros(m.shape), 0.0)
            cand = DeformationField(u, v)
            s = _ssd(warp(m, cand), f)
            if s < best[0]:
                best = (s, u, v, h_max)
        for _ in range(p.iterations_per_level):
            w = warp(m, DeformationField(u, v))
            diff = (w - f) / scale
            gwy, gwx = np.gradient(w)
            gx = 0.5 * (gfx + gwx) / scale
            gy = 0.5 * (gfy + gwy) / scale
            denom = gx * gx + gy * gy + diff * diff
            denom[denom < 1e-12] = np.inf
            du = -p.step_scale * diff * gx / denom
            dv = -p.step_scale * diff * gy / denom
            du, dv = smooth(du, p.smoothing_sigma_update), smooth(dv, p.smoothing_sigma_update)
            hu, hv = u + du, v + dv
            h_max = float(max(np.abs(hu).max(), np.abs(hv).max()))
            u, v = smooth(hu, p.smoothing_sigma_field), smooth(hv, p.smoothing_sigma_field)
            if finest:
                s = _ssd(warp(m, DeformationField(u, v)), f)
                if s < best[0]:
                    best = (s, u, v, h_max)

    ssd_after, u, v, h_max = best
    sigma = p.smoothing_sigma_field
    margin = int(4.0 * sigma + 0.5) + 2
    interior = (slice(margin, -margin), slice(margin, -margin))
    lap = 0.0
    if moving.shape[0] > 2 * margin and moving.shape[1] > 2 * margin:
        lap = float(max(np.abs(ndimage.laplace(u)[interior]).max(),
                        np.abs(ndimage.laplace(v)[interior]).max()))
    meta = {
        "ssd_before": ssd0,
        "ssd_after": ssd_after,
        "max_laplacian": lap,
        "laplacian_bound": h_max * _laplacian_l1_of_gaussian(sigma),
        "laplacian_margin": margin,
    }
    return DeformationField(u, v, meta)
