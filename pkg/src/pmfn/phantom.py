"""Synthetic layered B-scan volumes with vessels and multiplicative speckle.

Geometry
--------
Each layer is described by its top boundary, a polynomial in the normalised
column coordinate ``t = x / (width - 1)``. Coefficients are in pixels and in
increasing power order (``c0 + c1 t + c2 t^2 ...``). A layer runs from its top
boundary to the next layer's top boundary; the last layer runs to the bottom
of the image. Rows above the first boundary hold ``background``.

Pixel values integrate the piecewise-constant reflectivity profile over each
row ``[y, y + 1)`` so boundaries are anti-aliased and drift stays smooth.

Tissue below the first boundary can carry a smooth multiplicative texture
(``1 + texture * n`` with ``n`` unit-variance Gaussian-filtered noise). The
texture is fixed to the anatomy, so it drifts with the layers.

Between locations the whole anatomy drifts vertically by
``anatomy_drift * sin(2 pi (cycles * t + phase_step * i) + phase)``.
Repeated frames at one location are integer translations of the clean
slice (frame 0 is never moved) multiplied by unit-mean Gamma speckle.
"""

from dataclasses import asdict, dataclass, field
import json
import math
import os

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .imgreg import Translation, shift

SPECKLE_OFF = math.inf


def _rng(seed, *key):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])


# RNG stream tags
_STREAM_SPECKLE = 1
_STREAM_JITTER = 2
_STREAM_DRIFT = 3
_STREAM_TEXTURE = 4


@dataclass(frozen=True)
class Layer:
    top: tuple  # polynomial coefficients, pixels, increasing power of t
    reflectivity: float
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "top", tuple(float(c) for c in self.top))

    def boundary(self, t):
        return np.polynomial.polynomial.polyval(t, np.asarray(self.top, dtype=float))


@dataclass(frozen=True)
class Vessel:
    row: float
    col: float
    radius: float
    delta: float  # added to the local reflectivity; negative for dark vessels


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    n_locations: int = 16
    n_repeats: int = 5
    layers: tuple = ()
    vessels: tuple = ()
    background: float = 0.05
    anatomy_drift: float = 1.0
    drift_cycles: float = 0.5
    drift_phase_step: float = 0.05
    inter_frame_jitter: float = 0.0
    texture: float = 0.0
    texture_scale: float = 1.5
    speckle_looks: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, Layer) else Layer(**l) if isinstance(l, dict) else Layer(*l)
            for l in self.layers))
        object.__setattr__(self, "vessels", tuple(
            v if isinstance(v, Vessel) else Vessel(**v) if isinstance(v, dict) else Vessel(*v)
            for v in self.vessels))
        self.validate()

    def validate(self):
        if self.height < 1 or self.width < 2:
            raise ValidationError(f"height/width too small: {self.height}x{self.width}")
        if self.n_locations < 1:
            raise ValidationError(f"n_locations must be >= 1, got {self.n_locations}")
        if self.n_repeats < 1:
            raise ValidationError(f"n_repeats must be >= 1, got {self.n_repeats}")
        if not self.speckle_looks > 0:
            raise ValidationError(f"speckle_looks must be > 0, got {self.speckle_looks}")
        if not 0.0 <= self.background <= 1.0:
            raise ValidationError(f"background must lie in [0, 1], got {self.background}")
        if self.anatomy_drift < 0 or self.inter_frame_jitter < 0:
            raise ValidationError("anatomy_drift and inter_frame_jitter must be >= 0")
        if not 0.0 <= self.texture < 1.0 or not self.texture_scale > 0:
            raise ValidationError("texture must lie in [0, 1) and texture_scale must be > 0")
        t = np.linspace(0.0, 1.0, self.width)
        prev = None
        for k, layer in enumerate(self.layers):
            if not 0.0 <= layer.reflectivity <= 1.0:
                raise ValidationError(
                    f"layers[{k}].reflectivity must lie in [0, 1], got {layer.reflectivity}")
            b = layer.boundary(t)
            if prev is not None and not np.all(b > prev):
                raise ValidationError(f"layers[{k}].top is not strictly below layers[{k - 1}].top "
                                      "at every column")
            prev = b
        for k, v in enumerate(self.vessels):
            if v.radius <= 0:
                raise ValidationError(f"vessels[{k}].radius must be > 0, got {v.radius}")

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [dict(top=list(l.top), reflectivity=l.reflectivity, label=l.label)
                       for l in self.layers]
        d["vessels"] = [asdict(v) for v in self.vessels]
        if math.isinf(self.speckle_looks):
            d["speckle_looks"] = None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown PhantomSpec keys: {sorted(unknown)}")
        if d.get("speckle_looks", 1.0) is None:
            d["speckle_looks"] = SPECKLE_OFF
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def retina_spec(height=64, width=64, boundary_shape=(3.0, -9.0, 6.0), **overrides):
    """A retina-like default: background, RNFL, GCL, IPL, INL, OPL, ONL, RPE, choroid.

    All boundaries share the profile ``boundary_shape`` (coefficients of
    ``t, t^2, ...`` in pixels at height 64; the default is an asymmetric
    cubic with a shallow pit left of centre). Seven vessels of mixed size
    sit in the inner layers; tissue carries 10% texture.
    """
    s = height / 64.0
    rows = [(8, "RNFL", 0.75), (14, "GCL", 0.45), (22, "IPL", 0.65), (28, "INL", 0.30),
            (34, "OPL", 0.60), (40, "ONL", 0.20), (49, "RPE", 0.90), (55, "", 0.05)]
    shape = tuple(c * s for c in boundary_shape)
    layers = tuple(Layer(top=(r * s, *shape), reflectivity=refl, label=lab)
                   for r, lab, refl in rows)
    vessels = tuple(
        Vessel(row=r * s, col=c * width, radius=rad * s, delta=d)
        for r, c, rad, d in [(18.5, 0.12, 1.6, -0.3), (18.0, 0.30, 1.2, -0.3),
                             (19.0, 0.78, 2.0, -0.3), (11.0, 0.55, 1.2, -0.45),
                             (25.5, 0.90, 1.4, -0.4), (31.0, 0.42, 1.3, 0.3),
                             (37.0, 0.66, 1.2, -0.35)])
    kw = dict(height=height, width=width, layers=layers, vessels=vessels, texture=0.1)
    kw.update(overrides)
    return PhantomSpec(**kw)


@dataclass
class PhantomVolume:
    spec: PhantomSpec
    clean: list  # clean[i] -> (H, W)
    frames: list  # frames[i][j] -> (H, W)
    drift: np.ndarray  # (n_locations, W) vertical anatomy offset per column
    jitter: list  # jitter[i][j] -> Translation applied to clean[i]
    truth: dict = field(default_factory=dict)

    def truth_transforms(self):
        return {
            "drift": self.drift.tolist(),
            "jitter": [[[t.dx, t.dy] for t in row] for row in self.jitter],
        }


def _row_coverage(tops, bottoms, height):
    """Fraction of each row ``[y, y+1)`` covered by ``[top, bottom)``; arrays over columns."""
    y = np.arange(height, dtype=float)[:, None]
    return np.clip(np.minimum(y + 1.0, bottoms[None, :]) - np.maximum(y, tops[None, :]), 0.0, 1.0)


def _texture_field(spec):
    pad = int(math.ceil(spec.anatomy_drift)) + 2
    raw = _rng(spec.seed, _STREAM_TEXTURE).standard_normal((spec.height + 2 * pad, spec.width))
    tex = ndimage.gaussian_filter(raw, spec.texture_scale, mode="wrap")
    return tex / tex.std(), pad


def render_clean(spec, offset):
    """Render one clean slice with the anatomy displaced down by ``offset`` (per column)."""
    h, w = spec.height, spec.width
    t = np.linspace(0.0, 1.0, w)
    img = np.full((h, w), float(spec.background))
    tops = [l.boundary(t) + offset for l in spec.layers]
    for k, layer in enumerate(spec.layers):
        bottom = tops[k + 1] if k + 1 < len(tops) else np.full(w, float(h) + 1e6)
        cov = _row_coverage(tops[k], bottom, h)
        img += cov * (layer.reflectivity - spec.background)
    if spec.texture > 0 and spec.layers:
        tex, pad = _texture_field(spec)
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        n = ndimage.map_coordinates(tex, [yy - offset[None, :] + pad, xx], order=1, mode="nearest")
        tissue = np.clip(_row_coverage(tops[0], np.full(w, h + 1e6), h), 0.0, 1.0)
        img = img * (1.0 + spec.texture * tissue * np.clip(n, -3.0, 3.0))
    if spec.vessels:
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        for v in spec.vessels:
            ci = int(np.clip(round(v.col), 0, w - 1))
            center_row = v.row + offset[ci]
            # ellipse: vertical semi-axis = radius, horizontal = 1.5 * radius, 1 px soft edge
            r = np.sqrt(((yy + 0.5 - center_row) / v.radius) ** 2
                        + ((xx - v.col) / (1.5 * v.radius)) ** 2)
            weight = np.clip((1.0 - r) * v.radius + 0.5, 0.0, 1.0)
            img = img + weight * v.delta
    return np.clip(img, 0.0, 1.0)


def apply_speckle(img, looks, seed, stream=()):
    """Multiply by i.i.d. Gamma(looks, 1/looks) noise (unit mean, variance 1/looks).

    ``looks=SPECKLE_OFF`` (infinity) returns a copy of the input.
    """
    img = np.asarray(img, dtype=np.float64)
    if not looks > 0:
        raise ValidationError(f"speckle looks must be > 0, got {looks}")
    if np.any(img < 0):
        raise ValidationError("speckle input must be non-negative")
    if math.isinf(looks):
        return img.copy()
    noise = _rng(seed, _STREAM_SPECKLE, *stream).gamma(looks, 1.0 / looks, size=img.shape)
    return img * noise


def drift_offsets(spec):
    t = np.linspace(0.0, 1.0, spec.width)
    phase = _rng(spec.seed, _STREAM_DRIFT).uniform(0.0, 2.0 * math.pi)
    i = np.arange(spec.n_locations)[:, None]
    return spec.anatomy_drift * np.sin(
        2.0 * math.pi * (spec.drift_cycles * t[None, :] + spec.drift_phase_step * i) + phase)


def frame_jitter(spec, i):
    """Integer translations for the repeats at location ``i``; frame 0 stays put."""
    out = [Translation(0.0, 0.0)]
    if spec.n_repeats > 1:
        j = int(math.floor(spec.inter_frame_jitter))
        draws = _rng(spec.seed, _STREAM_JITTER, i).integers(-j, j + 1, size=(spec.n_repeats - 1, 2))
        out += [Translation(float(dx), float(dy)) for dx, dy in draws]
    return out


def generate_phantom(spec):
    spec.validate()
    drift = drift_offsets(spec)
    clean, frames, jitter = [], [], []
    for i in range(spec.n_locations):
        c = render_clean(spec, drift[i])
        js = frame_jitter(spec, i)
        clean.append(c)
        jitter.append(js)
        frames.append([apply_speckle(shift(c, t), spec.speckle_looks, spec.seed, (i, j))
                       for j, t in enumerate(js)])
    vol = PhantomVolume(spec=spec, clean=clean, frames=frames, drift=drift, jitter=jitter)
    vol.truth = vol.truth_transforms()
    return vol


def layer_span(spec, label, location, drift=None):
    """Rows ``(top, bottom)`` arrays of the layer labelled ``label`` at ``location``."""
    if drift is None:
        drift = drift_offsets(spec)
    t = np.linspace(0.0, 1.0, spec.width)
    for k, layer in enumerate(spec.layers):
        if layer.label == label:
            top = layer.boundary(t) + drift[location]
            if k + 1 < len(spec.layers):
                bottom = spec.layers[k + 1].boundary(t) + drift[location]
            else:
                bottom = np.full(spec.width, float(spec.height))
            return top, bottom
    raise ValidationError(f"no layer labelled {label!r}")


def _vessel_boxes(spec, offset):
    """Half-open ``(row0, row1, col0, col1)`` boxes around every vessel footprint, 1 px guard."""
    boxes = []
    for v in spec.vessels:
        ci = int(np.clip(round(v.col), 0, spec.width - 1))
        cr = v.row + offset[ci]
        half = 1.5 * (v.radius + 0.5)
        boxes.append((math.floor(cr - v.radius - 1) - 1, math.ceil(cr + v.radius) + 1,
                      math.floor(v.col - half) - 1, math.ceil(v.col + half) + 2))
    return boxes


def auto_rois(spec, labels=None, n_slices=10, margin=0, min_height=2, roi_width=None):
    """Foreground/background ROIs derived from the phantom geometry.

    At each of ``n_slices`` evenly spaced locations, every labelled layer gets
    one vessel-free foreground window ``roi_width`` columns wide (default
    ``max(8, width // 4)``), placed where the layer is thickest after trimming
    ``margin`` rows at each boundary (partially covered boundary rows are
    always excluded). One background ROI per location covers
    the signal-free band above the first layer. Returns JSON-ready dicts.
    """
    drift = drift_offsets(spec)
    if labels is None:
        labels = [l.label for l in spec.layers if l.label]
    if roi_width is None:
        roi_width = max(8, spec.width // 4)
    roi_width = min(roi_width, spec.width)
    locs = np.unique(np.linspace(0, spec.n_locations - 1, min(n_slices, spec.n_locations))
                     .round().astype(int))
    t = np.linspace(0.0, 1.0, spec.width)
    starts = range(spec.width - roi_width + 1)
    rois = []
    for i in locs:
        boxes = _vessel_boxes(spec, drift[i])
        first_top = spec.layers[0].boundary(t) + drift[i]
        bg_bottom = int(math.floor(first_top.min())) - margin
        if bg_bottom - margin < 1:
            continue
        entries = []
        for label in labels:
            top, bottom = layer_span(spec, label, i, drift)
            best = None
            for c in starts:
                cols = slice(c, c + roi_width)
                r0 = int(math.ceil(top[cols].max())) + margin
                r1 = int(math.floor(bottom[cols].min())) - margin
                if r1 - r0 < min_height or (best is not None and r1 - r0 <= best[2] - best[1]):
                    continue
                if not any(r0 < b[1] and b[0] < r1 and c < b[3] and b[2] < c + roi_width
                           for b in boxes):
                    best = (c, r0, r1)
            if best is not None:
                c, r0, r1 = best
                entries.append(dict(location=int(i), role="foreground", layer=label,
                                    top=r0, left=c, height=r1 - r0, width=roi_width))
        if entries:
            rois.append(dict(location=int(i), role="background", layer="background",
                             top=margin, left=0, height=bg_bottom - margin, width=spec.width))
            rois.extend(entries)
    return rois


def profile_roi(spec, location=None, labels=("GCL", "IPL", "INL", "OPL", "ONL"), width=None):
    """A multi-layer window (default GCL..ONL) for row-profile plots, vessel-free where possible."""
    if location is None:
        location = spec.n_locations // 2
    drift = drift_offsets(spec)
    width = min(width or max(8, spec.width // 4), spec.width)
    top, _ = layer_span(spec, labels[0], location, drift)
    _, bottom = layer_span(spec, labels[-1], location, drift)
    best = None
    for c in range(spec.width - width + 1):
        hits = sum(1 for v in spec.vessels
                   if c - 1.5 * v.radius - 1 <= v.col <= c + width + 1.5 * v.radius + 1)
        r0 = int(np.ceil(top[c:c + width].max()))
        r1 = int(np.floor(bottom[c:c + width].min()))
        key = (hits, -(r1 - r0))
        if best is None or key < best[0]:
            best = (key, c, r0, r1)
    _, c, r0, r1 = best
    return dict(location=int(location), top=r0, left=c, height=r1 - r0, width=width,
                layers=list(labels))


def save_phantom(vol, root):
    """Write frames, clean slices, truth transforms, ROIs and the manifest under ``root``."""
    from .workspace import Workspace, frame_key

    spec = vol.spec
    ws = Workspace.create(root, spec.n_locations, spec.n_repeats, (spec.height, spec.width))
    for i in range(spec.n_locations):
        ws.write("clean", i, vol.clean[i])
        for j in range(spec.n_repeats):
            ws.write("hn", frame_key(i, j), vol.frames[i][j])
    ws.manifest["phantom"] = spec.to_dict()
    ws.save()
    with open(os.path.join(root, "truth.json"), "w") as f:
        json.dump(vol.truth, f, indent=1, sort_keys=True)
    with open(os.path.join(root, "rois.json"), "w") as f:
        json.dump({"rois": auto_rois(spec), "profile": profile_roi(spec)}, f, indent=1,
                  sort_keys=True)
    return ws
