"""Denoising quality metrics over rectangular regions of interest.

The ROI-based SNR and PSNR below are the reference-free variants used for
OCT: the foreground window is assumed to hold only signal and the
background window only speckle, so no clean image is needed.
"""

from dataclasses import asdict, dataclass, field
import hashlib
import json
import math

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, ValidationError


@dataclass(frozen=True)
class ROI:
    top: int
    left: int
    height: int
    width: int
    role: str = "foreground"
    layer: str = ""

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValidationError(f"ROI must have positive area, got {self.height}x{self.width}")
        if self.top < 0 or self.left < 0:
            raise ValidationError(f"ROI origin must be non-negative, got ({self.top}, {self.left})")
        if self.role not in ("foreground", "background"):
            raise ValidationError(f"ROI role must be foreground or background, got {self.role!r}")

    @property
    def area(self):
        return self.height * self.width

    def slices(self):
        return (slice(self.top, self.top + self.height), slice(self.left, self.left + self.width))

    def pixels(self, img):
        img = np.asarray(img, dtype=np.float64)
        if self.top + self.height > img.shape[0] or self.left + self.width > img.shape[1]:
            raise ValidationError(f"ROI {self} exceeds image bounds {img.shape}")
        return img[self.slices()]

    @classmethod
    def from_dict(cls, d):
        keys = ("top", "left", "height", "width", "role", "layer")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass(frozen=True)
class ROIStats:
    mean: float
    std: float  # population
    sum_sq: float
    max: float

    @classmethod
    def of(cls, pixels):
        p = np.asarray(pixels, dtype=np.float64)
        if p.size == 0:
            raise ValidationError("empty ROI")
        return cls(float(p.mean()), float(p.std()), float((p * p).sum()), float(p.max()))


def matched_background(fg_pixels, bg_pixels):
    """Crop (or wrap-tile) the background to the foreground's exact shape.

    The top-left sub-rectangle of the background is used; if the background
    is smaller along an axis it is tiled periodically first.
    """
    fh, fw = fg_pixels.shape
    bh, bw = bg_pixels.shape
    if bh < fh or bw < fw:
        bg_pixels = np.pad(bg_pixels, ((0, max(fh - bh, 0)), (0, max(fw - bw, 0))), mode="wrap")
    return bg_pixels[:fh, :fw]


def _pair(img, fg, bg):
    f = fg.pixels(img)
    b = matched_background(f, bg.pixels(img))
    return f, b


def snr(img, fg, bg):
    """``10 log10(sum f^2 / sum b^2)`` with the area-matched background, in dB."""
    f, b = _pair(img, fg, bg)
    eb = float((b * b).sum())
    if eb == 0.0:
        raise DegenerateInputError(f"background ROI {bg} has zero energy")
    return 10.0 * math.log10(float((f * f).sum()) / eb)


def psnr(img, fg, bg):
    """``10 log10(n_x n_y max(f)^2 / sum b^2)``, in dB."""
    f, b = _pair(img, fg, bg)
    eb = float((b * b).sum())
    if eb == 0.0:
        raise DegenerateInputError(f"background ROI {bg} has zero energy")
    return 10.0 * math.log10(f.size * float(f.max()) ** 2 / eb)


def cnr(img, fg, bg):
    """``|mu_f - mu_b| / sqrt((sigma_f^2 + sigma_b^2) / 2)`` with population std."""
    sf = ROIStats.of(fg.pixels(img))
    sb = ROIStats.of(bg.pixels(img))
    denom = math.sqrt(0.5 * (sf.std ** 2 + sb.std ** 2))
    if denom == 0.0:
        raise DegenerateInputError("CNR undefined: both ROIs have zero variance")
    return abs(sf.mean - sb.mean) / denom


def flat_snr(img, roi):
    """Homogeneity SNR ``10 log10(mu^2 / sigma^2)`` inside one flat ROI, in dB.

    Unlike :func:`snr`, this grows by ``10 log10(K)`` when ``K`` independent
    speckle realisations are averaged, so it measures noise suppression.
    """
    s = ROIStats.of(roi.pixels(img))
    if s.std == 0.0:
        return math.inf
    return 10.0 * math.log10(s.mean ** 2 / s.std ** 2)


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = None

    def to_dict(self):
        return asdict(self)


def gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2.0 * sigma ** 2))
    g /= g.sum()
    return g


def _valid_filter(img, g):
    # separable correlation, keeping only windows fully inside the image
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(x, y, cfg=SSIMConfig()):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"SSIM shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < cfg.window:
        raise ValidationError(f"image {x.shape} smaller than the {cfg.window}px SSIM window")
    L = cfg.data_range
    if L is None:
        L = max(x.max(), y.max()) - min(x.min(), y.min())
        if L == 0:
            L = 1.0
    c1 = (cfg.k1 * L) ** 2
    c2 = (cfg.k2 * L) ** 2
    g = gaussian_window(cfg.window, cfg.sigma)
    mx, my = _valid_filter(x, g), _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, y, cfg=SSIMConfig()):
    """Mean structural similarity over all fully contained Gaussian windows."""
    return float(ssim_map(x, y, cfg).mean())


def mean_column_intensity(pixels):
    """Row profile of an ROI: mean over columns minus the ROI mean."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ValidationError(f"column intensity needs a non-empty 2-D ROI, got shape {p.shape}")
    return p.mean(axis=1) - p.mean()


def layer_mean_intensity(img, rois):
    """Mean intensity inside each ROI, in the order given."""
    return [float(r.pixels(img).mean()) for r in rois]


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    """Per-image, per-layer metric values plus provenance.

    ``layers`` maps image id -> layer -> {"snr", "psnr", "cnr"} averaged over
    the evaluated slices; ``per_slice`` keeps the individual values.
    """

    layers: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    columns: dict = field(default_factory=dict)
    layer_means: dict = field(default_factory=dict)
    per_slice: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def validate(self):
        def walk(v, path):
            if isinstance(v, dict):
                for k, x in v.items():
                    walk(x, f"{path}.{k}")
            elif isinstance(v, (list, tuple)):
                for i, x in enumerate(v):
                    walk(x, f"{path}[{i}]")
            elif isinstance(v, float) and not math.isfinite(v):
                raise ValidationError(f"non-finite metric at {path}")
        for name in ("layers", "ssim", "columns", "layer_means", "per_slice"):
            walk(getattr(self, name), name)

    def to_json(self):
        self.validate()
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())
