"""Denoising pipeline: preprocessing, frame averaging, self-fusion targets,
pseudo-modality network, fusion network and single-input baseline.

Stages run on a :class:`~pmfn.workspace.Workspace` and are cached by a
fingerprint of their configuration and input file contents, so rerunning
only recomputes what changed (or everything with ``force=True``).
"""

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
import csv
import logging
import os

import numpy as np

from .errors import PMFNError, StageDependencyError, ValidationError
from .imgreg import RegParams, register_rigid, shift
from .nn import (LossConfig, MSUNConfig, TrainConfig, l1_loss, load_checkpoint, pmfn_loss,
                 predict, save_checkpoint, train)
from .selffusion import FusionParams, self_fuse, sobel_gradient
from .workspace import Workspace, digest, file_digest, frame_key

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Pipeline settings. Defaults are desk-scale; :meth:`full` gives full scale.

    ``repeat_used`` is the 0-based repeat fed to the networks (the first
    frame); the other repeats are only read for frame averaging.
    """

    crop: tuple = None  # (rows, cols); None keeps the raw size
    crop_row_offset: int = None  # None centres the crop window
    pad_to: tuple = None  # (rows, cols); None skips padding
    radius: int = 7
    repeat_used: int = 0
    rigid_bound: int = 8
    normalize_percentiles: tuple = (0.1, 99.9)
    fusion: FusionParams = field(default_factory=FusionParams)
    net1: MSUNConfig = field(default_factory=MSUNConfig)
    net2: MSUNConfig = field(default_factory=lambda: MSUNConfig(in_channels=3))
    baseline: MSUNConfig = field(default_factory=MSUNConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.radius < 0:
            raise ValidationError(f"radius must be >= 0, got {self.radius}")
        if self.repeat_used < 0:
            raise ValidationError(f"repeat_used must be >= 0, got {self.repeat_used}")
        if self.crop is not None and self.pad_to is not None:
            if self.pad_to[0] < self.crop[0] or self.pad_to[1] < self.crop[1]:
                raise ValidationError(f"pad_to {self.pad_to} smaller than crop {self.crop}")
        # network input widths follow from the pipeline, not from user settings
        object.__setattr__(self, "net1", replace(self.net1, in_channels=2 * self.radius + 1))
        object.__setattr__(self, "net2", replace(self.net2, in_channels=3))
        object.__setattr__(self, "baseline", replace(self.baseline, in_channels=1))
        object.__setattr__(self, "fusion", replace(self.fusion, radius=self.radius))

    @classmethod
    def full(cls, **overrides):
        """512x1024 raw frames cropped and padded to 512x512, depth-4 networks,
        and the default training schedule (lr 1e-4, decay 0.3 per epoch)."""
        kw = dict(crop=(512, 500), pad_to=(512, 512), radius=7, rigid_bound=16,
                  net1=MSUNConfig(depth=4, base_channels=32),
                  net2=MSUNConfig(depth=4, base_channels=32),
                  baseline=MSUNConfig(depth=4, base_channels=32))
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, **overrides):
        """Small-network settings that train in about a minute on 64x64 phantoms:
        a higher learning rate with gentler decay, and per-pixel L1 so both
        loss terms share a scale.
        """
        kw = dict(training=TrainConfig(epochs=15, lr=2e-3, lr_decay=0.85),
                  loss=LossConfig(normalize_l1=True))
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        """Build from a (possibly partial) nested dict; unknown keys are rejected."""
        nested = {"fusion": FusionParams, "net1": MSUNConfig, "net2": MSUNConfig,
                  "baseline": MSUNConfig, "loss": LossConfig, "training": TrainConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in nested:
                kw[k] = _build(nested[k], v, k)
            elif k in ("crop", "pad_to", "normalize_percentiles") and v is not None:
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)


def _build(kind, d, where):
    if not isinstance(d, dict):
        raise ValidationError(f"config section {where!r} must be an object")
    known = {f.name for f in fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown keys in {where!r}: {sorted(unknown)}")
    d = dict(d)
    if kind is FusionParams and "reg" in d:
        d["reg"] = _build(RegParams, d["reg"], f"{where}.reg")
    try:
        return kind(**d)
    except TypeError as err:
        raise ValidationError(f"bad config section {where!r}: {err}") from err


# ---------------------------------------------------------------- image ops

def preprocess(raw, crop=None, pad_to=None, row_offset=None):
    """Crop to ``crop`` then zero-pad symmetrically to ``pad_to``.

    The crop window is centred unless ``row_offset`` is given; columns are
    always centred. Odd padding puts the extra pixel after the image.
    """
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"preprocess expects a 2-D image, got {img.shape}")
    if crop is not None:
        ch, cw = crop
        h, w = img.shape
        if h < ch or w < cw:
            raise ValidationError(f"image {img.shape} smaller than crop {tuple(crop)}")
        r0 = (h - ch) // 2 if row_offset is None else int(row_offset)
        if not 0 <= r0 <= h - ch:
            raise ValidationError(f"crop row offset {r0} outside [0, {h - ch}]")
        c0 = (w - cw) // 2
        img = img[r0:r0 + ch, c0:c0 + cw]
    if pad_to is not None:
        ph, pw = pad_to
        h, w = img.shape
        if ph < h or pw < w:
            raise ValidationError(f"pad_to {tuple(pad_to)} smaller than image {img.shape}")
        top, left = (ph - h) // 2, (pw - w) // 2
        img = np.pad(img, ((top, ph - h - top), (left, pw - w - left)))
    return img


def frame_average(frames, bound=8):
    """Register every frame to the first (translation only) and average."""
    if len(frames) < 2:
        raise ValidationError(f"frame_average needs at least 2 frames, got {len(frames)}")
    ref = np.asarray(frames[0], dtype=np.float64)
    acc = ref.copy()
    for k, f in enumerate(frames[1:], start=1):
        f = np.asarray(f, dtype=np.float64)
        if f.shape != ref.shape:
            raise ValidationError(f"frame {k} has shape {f.shape}, frame 0 has {ref.shape}")
        t = register_rigid(f, ref, bound)
        acc += shift(f, -t)
    return acc / len(frames)


def neighbour_stack(images, i, radius):
    """Slices ``i - radius .. i + radius`` with indices clamped to the volume (edge replication)."""
    n = len(images)
    return np.stack([images[min(max(k, 0), n - 1)] for k in range(i - radius, i + radius + 1)])


@dataclass(frozen=True)
class Normalization:
    lo: float
    hi: float

    def apply(self, a):
        return (np.asarray(a, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def invert(self, a):
        return np.asarray(a, dtype=np.float64) * (self.hi - self.lo) + self.lo

    @property
    def scale(self):
        return self.hi - self.lo


def volume_normalization(images, percentiles=(0.1, 99.9)):
    lo, hi = np.percentile(np.stack(images), percentiles)
    if hi <= lo:
        raise ValidationError("volume has no intensity range to normalise")
    return Normalization(float(lo), float(hi))


# ---------------------------------------------------------------- stages

@contextmanager
def _stage(ws, name):
    prev, ws.active_stage = ws.active_stage, name
    try:
        yield
    except PMFNError as err:
        if getattr(err, "_stage_tagged", False):
            raise
        err.args = (f"[stage {name}] {err.args[0] if err.args else err}",) + err.args[1:]
        err._stage_tagged = True
        raise
    finally:
        ws.active_stage = prev


def _per_slice(stage, indices, fn, threads=1):
    def run(i):
        try:
            return fn(i)
        except PMFNError as err:
            err.args = (f"[stage {stage}, slice {i}] {err.args[0] if err.args else err}",)
            err._stage_tagged = True
            raise
    if threads > 1 and len(indices) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, indices))
    return [run(i) for i in indices]


def _finish(ws, stage, fp):
    ws.manifest["fingerprints"][stage] = fp
    ws.save()


def run_preprocess(ws, cfg, force=False):
    ws.require("hn", "generate or import the raw frames first")
    fp = digest(["pre", cfg.crop, cfg.crop_row_offset, cfg.pad_to, ws.stage_digest("hn")])
    if not force and ws.is_current("pre", fp):
        return False
    with _stage(ws, "pre"):
        for key in ws.keys("hn"):
            out = preprocess(ws.read("hn", key), cfg.crop, cfg.pad_to, cfg.crop_row_offset)
            ws.write("pre", key, out)
        shape = ws.read("pre", ws.keys("pre")[0]).shape
        ws.manifest["shape"] = list(shape)
    _finish(ws, "pre", fp)
    return True


def run_average(ws, cfg, force=False, threads=1):
    ws.require("pre", "run preprocessing first")
    fp = digest(["ln", cfg.rigid_bound, ws.stage_digest("pre")])
    if not force and ws.is_current("ln", fp):
        return False
    with _stage(ws, "ln"):
        def one(i):
            frames = [ws.read("pre", frame_key(i, j)) for j in range(ws.n_repeats)]
            if len(frames) == 1:
                return frames[0]
            return frame_average(frames, cfg.rigid_bound)
        outs = _per_slice("ln", list(range(ws.n_locations)), one, threads)
        for i, out in enumerate(outs):
            ws.write("ln", i, out)
    _finish(ws, "ln", fp)
    return True


def run_selffuse(ws, cfg, force=False, threads=1):
    ws.require("ln", "run frame averaging first")
    fp = digest(["sf", asdict(cfg.fusion), ws.stage_digest("ln")])
    if not force and ws.is_current("sf", fp):
        return False
    with _stage(ws, "sf"):
        stack = [ws.read("ln", i) for i in range(ws.n_locations)]
        outs = _per_slice("sf", list(range(ws.n_locations)),
                          lambda i: self_fuse(stack, i, cfg.fusion), threads)
        for i, out in enumerate(outs):
            ws.write("sf", i, out)
    _finish(ws, "sf", fp)
    return True


def hn_images(ws, cfg):
    """The single frames the networks see: repeat ``repeat_used`` at every location."""
    if cfg.repeat_used >= ws.n_repeats:
        raise ValidationError(f"repeat_used={cfg.repeat_used} but the volume has "
                              f"{ws.n_repeats} repeats")
    return [ws.read("pre", frame_key(i, cfg.repeat_used)) for i in range(ws.n_locations)]


def normalization(ws, cfg):
    ws.require("pre", "run preprocessing first")
    fp = digest(["norm", list(cfg.normalize_percentiles), cfg.repeat_used,
                 ws.manifest["fingerprints"].get("pre")])
    norm = ws.manifest.get("normalization")
    if norm is not None and norm.get("fingerprint") == fp:
        return Normalization(norm["lo"], norm["hi"])
    with _stage(ws, "norm"):
        n = volume_normalization(hn_images(ws, cfg), cfg.normalize_percentiles)
    ws.manifest["normalization"] = {"lo": n.lo, "hi": n.hi, "fingerprint": fp}
    ws.save()
    return n


def build_net1_sample(hn, targets, i, radius, norm=None):
    """Input stack ``X_{i-r} .. X_{i+r}`` (edge-replicated) and target ``S_i``.

    ``targets`` is the list of self-fusion images, or ``None`` for inference.
    """
    if targets is not None and targets[i] is None:
        raise StageDependencyError(f"self-fusion target for slice {i} is missing; "
                                   "run the self-fusion stage first")
    x = neighbour_stack(hn, i, radius)
    if norm is not None:
        x = norm.apply(x)
    if targets is None:
        return x, None
    s = targets[i] if norm is None else norm.apply(targets[i])
    return x, s[None]


def _write_history(path, history, lr_history, steps_per_epoch):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch", "lr", "loss"])
        for k, loss in enumerate(history):
            e = k // steps_per_epoch
            w.writerow([k, e, repr(lr_history[min(e, len(lr_history) - 1)]), repr(loss)])


def _train_stage(ws, cfg, name, model_cfg, dataset, loss_fn, inputs_fp, force):
    fp = digest(["train", name, asdict(model_cfg), asdict(cfg.loss), asdict(cfg.training),
                 inputs_fp])
    ckpt = os.path.join(ws.root, "checkpoints", f"{name}.ckpt")
    if (not force and ws.manifest["fingerprints"].get(f"ckpt:{name}") == fp
            and os.path.isfile(ckpt)):
        return ckpt, False
    with _stage(ws, f"train:{name}"):
        result = train(model_cfg, dataset, loss_fn, cfg.training)
    os.makedirs(os.path.dirname(ckpt), exist_ok=True)
    save_checkpoint(ckpt, {"model": asdict(model_cfg), "kind": name}, result.params,
                    step=len(result.history),
                    extra={"loss": asdict(cfg.loss), "training": asdict(cfg.training)})
    _write_history(os.path.join(ws.root, "checkpoints", f"{name}_loss.csv"), result.history,
                   result.lr_history, len(dataset))
    ws.manifest["checkpoints"][name] = os.path.relpath(ckpt, ws.root)
    ws.manifest["fingerprints"][f"ckpt:{name}"] = fp
    ws.save()
    return ckpt, True


def run_train_net1(ws, cfg, force=False):
    ws.require("sf", "run the self-fusion stage first")
    norm = normalization(ws, cfg)
    with _stage(ws, "train:net1"):
        hn = hn_images(ws, cfg)
        sf = [ws.read("sf", i) for i in range(ws.n_locations)]
        data = [build_net1_sample(hn, sf, i, cfg.radius, norm) for i in range(ws.n_locations)]
    data = [(x, (s,)) for x, s in data]
    fp = digest([ws.manifest["fingerprints"].get("pre"), ws.stage_digest("sf"), cfg.repeat_used])
    normalize = cfg.loss.normalize_l1
    return _train_stage(ws, cfg, "net1", cfg.net1, data,
                        lambda pred, s: l1_loss(pred, s, normalize), fp, force)


def _load_model(path, expect):
    header, params = load_checkpoint(path)
    model = MSUNConfig(**header["config"]["model"])
    if header["config"].get("kind") != expect:
        raise ValidationError(f"{path} holds a {header['config'].get('kind')!r} network, "
                              f"expected {expect!r}")
    return model, params


def run_pseudo(ws, cfg, net1_ckpt, force=False, threads=1):
    """Predict the pseudo-modality for every slice and its Sobel gradient map."""
    ws.require("pre", "run preprocessing first")
    fp = digest(["pseudo", file_digest(net1_ckpt), cfg.radius, cfg.repeat_used,
                 ws.manifest["fingerprints"].get("pre")])
    if not force and ws.is_current("pseudo", fp) and ws.is_current("grad", fp):
        return False
    model, params = _load_model(net1_ckpt, "net1")
    if model.in_channels != 2 * cfg.radius + 1:
        raise ValidationError(f"net1 checkpoint expects {model.in_channels} slices, "
                              f"radius {cfg.radius} gives {2 * cfg.radius + 1}")
    norm = normalization(ws, cfg)
    with _stage(ws, "pseudo"):
        hn = hn_images(ws, cfg)

        def one(i):
            x, _ = build_net1_sample(hn, None, i, cfg.radius, norm)
            return norm.invert(predict(model, params, x))
        pseudo = _per_slice("pseudo", list(range(ws.n_locations)), one, threads)
        for i, p in enumerate(pseudo):
            ws.write("pseudo", i, p)
            ws.write("grad", i, sobel_gradient(p))
    ws.manifest["fingerprints"]["pseudo"] = fp
    _finish(ws, "grad", fp)
    return True


def pmfn_input(x, pseudo, grad, norm):
    """Stack (noisy slice, pseudo-modality, gradient map) in network units."""
    shapes = {np.shape(x), np.shape(pseudo), np.shape(grad)}
    if len(shapes) != 1:
        raise ValidationError(f"PMFN inputs differ in shape: {sorted(shapes)}")
    return np.stack([norm.apply(x), norm.apply(pseudo), np.asarray(grad) / norm.scale])


def run_train_pmfn(ws, cfg, force=False):
    ws.require("pseudo", "run the pseudo-modality stage (net1 inference) first")
    ws.require("grad", "run the pseudo-modality stage (net1 inference) first")
    ws.require("sf", "run the self-fusion stage first")
    ws.require("ln", "run frame averaging first")
    norm = normalization(ws, cfg)
    with _stage(ws, "train:pmfn"):
        hn = hn_images(ws, cfg)
        data = []
        for i in range(ws.n_locations):
            x = pmfn_input(hn[i], ws.read("pseudo", i), ws.read("grad", i), norm)
            y = norm.apply(ws.read("ln", i))[None]
            s = norm.apply(ws.read("sf", i))[None]
            data.append((x, (y, s)))
    fp = digest([ws.manifest["fingerprints"].get("pre"), ws.stage_digest("ln"),
                 ws.stage_digest("sf"), ws.stage_digest("pseudo"), ws.stage_digest("grad"),
                 cfg.repeat_used])
    lcfg = cfg.loss
    return _train_stage(ws, cfg, "pmfn", cfg.net2, data,
                        lambda pred, y, s: pmfn_loss(pred, y, s, lcfg), fp, force)


def run_train_baseline(ws, cfg, force=False):
    ws.require("ln", "run frame averaging first")
    norm = normalization(ws, cfg)
    with _stage(ws, "train:baseline"):
        hn = hn_images(ws, cfg)
        data = [(norm.apply(hn[i])[None], (norm.apply(ws.read("ln", i))[None],))
                for i in range(ws.n_locations)]
    fp = digest([ws.manifest["fingerprints"].get("pre"), ws.stage_digest("ln"), cfg.repeat_used])
    normalize = cfg.loss.normalize_l1
    return _train_stage(ws, cfg, "baseline", cfg.baseline, data,
                        lambda pred, y: l1_loss(pred, y, normalize), fp, force)


def denoise_pmfn(model, params, x, pseudo, grad, norm):
    return norm.invert(predict(model, params, pmfn_input(x, pseudo, grad, norm)))


def run_baseline(model, params, x, norm):
    return norm.invert(predict(model, params, norm.apply(x)[None]))


def run_denoise(ws, cfg, pmfn_ckpt=None, baseline_ckpt=None, force=False, threads=1):
    """Write ``out`` (fusion network) and/or ``out_baseline`` for every slice."""
    changed = False
    norm = normalization(ws, cfg)
    if pmfn_ckpt is not None:
        ws.require("pseudo", "run the pseudo-modality stage (net1 inference) first")
        ws.require("grad", "run the pseudo-modality stage (net1 inference) first")
        fp = digest(["out", file_digest(pmfn_ckpt), ws.stage_digest("pseudo"),
                     ws.stage_digest("grad"), cfg.repeat_used,
                     ws.manifest["fingerprints"].get("pre")])
        if force or not ws.is_current("out", fp):
            model, params = _load_model(pmfn_ckpt, "pmfn")
            with _stage(ws, "out"):
                hn = hn_images(ws, cfg)
                outs = _per_slice("out", list(range(ws.n_locations)), lambda i: denoise_pmfn(
                    model, params, hn[i], ws.read("pseudo", i), ws.read("grad", i), norm), threads)
                for i, o in enumerate(outs):
                    ws.write("out", i, o)
            _finish(ws, "out", fp)
            changed = True
    if baseline_ckpt is not None:
        fp = digest(["out_baseline", file_digest(baseline_ckpt), cfg.repeat_used,
                     ws.manifest["fingerprints"].get("pre")])
        if force or not ws.is_current("out_baseline", fp):
            model, params = _load_model(baseline_ckpt, "baseline")
            with _stage(ws, "out_baseline"):
                hn = hn_images(ws, cfg)
                outs = _per_slice("out_baseline", list(range(ws.n_locations)),
                                  lambda i: run_baseline(model, params, hn[i], norm), threads)
                for i, o in enumerate(outs):
                    ws.write("out_baseline", i, o)
            _finish(ws, "out_baseline", fp)
            changed = True
    return changed


def run_full(cfg, ws, train_ws=None, force=False, threads=1):
    """Run every stage in order. Networks are trained on ``train_ws`` (default:
    ``ws`` itself) and applied to ``ws``. Returns the list of stages recomputed.
    """
    if train_ws is None:
        train_ws = ws
    volumes = [train_ws] if train_ws is ws else [train_ws, ws]
    ran = []

    def step(label, did):
        if did:
            ran.append(label)
            log.info("ran %s", label)

    for v in volumes:
        tag = "train" if v is train_ws and v is not ws else "test"
        v.manifest["config_hash"] = digest(cfg.to_dict())[:16]
        step(f"{tag}:pre", run_preprocess(v, cfg, force))
        step(f"{tag}:ln", run_average(v, cfg, force, threads))
        step(f"{tag}:sf", run_selffuse(v, cfg, force, threads))
    net1, did = run_train_net1(train_ws, cfg, force)
    step("net1", did)
    for v in volumes:
        tag = "train" if v is train_ws and v is not ws else "test"
        step(f"{tag}:pseudo", run_pseudo(v, cfg, net1, force, threads))
    pmfn, did = run_train_pmfn(train_ws, cfg, force)
    step("pmfn", did)
    base, did = run_train_baseline(train_ws, cfg, force)
    step("baseline", did)
    if ws is not train_ws:
        ws.manifest["checkpoints"] = {k: os.path.relpath(p, ws.root) for k, p in
                                      (("net1", net1), ("pmfn", pmfn), ("baseline", base))}
    step("test:out", run_denoise(ws, cfg, pmfn, base, force, threads))
    for v in volumes:
        v.save()
    return ran


def open_workspace(path):
    return Workspace.open(path)
