"""Evaluate a workspace against ROIs and write the report files.

ROI file (``rois.json``)::

    {"rois": [{"location", "role", "layer", "top", "left", "height", "width"}, ...],
     "profile": {"location", "top", "left", "height", "width"}}   # optional

Each foreground ROI pairs with the background ROI at the same location.
Coordinates refer to the preprocessed images. A bare list is accepted in
place of the object.
"""

import csv
import json
import os

import numpy as np

from .errors import StageDependencyError, ValidationError
from .metrics import (ROI, MetricsReport, SSIMConfig, cnr, config_hash, layer_mean_intensity,
                      mean_column_intensity, psnr, snr, ssim)
from .workspace import frame_key

DEFAULT_IMAGES = ("hn", "ln", "out_baseline", "out")


def load_rois(path):
    with open(path) as f:
        doc = json.load(f)
    if isinstance(doc, list):
        doc = {"rois": doc}
    if not isinstance(doc, dict) or "rois" not in doc:
        raise ValidationError(f"{path}: expected a list of ROIs or an object with 'rois'")
    unknown = set(doc) - {"rois", "profile"}
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    entries = []
    for k, d in enumerate(doc["rois"]):
        if "location" not in d:
            raise ValidationError(f"{path}: rois[{k}] has no location")
        entries.append((int(d["location"]), ROI.from_dict(d)))
    return entries, doc.get("profile")


def read_image(ws, image, i, repeat=0):
    """Image ``image`` at location ``i``; ``hn`` means the preprocessed single frame."""
    if image == "hn":
        stage = "pre" if ws.has_stage("pre") else "hn"
        return ws.read(stage, frame_key(i, repeat))
    if not ws.has_stage(image):
        raise StageDependencyError(f"{ws.root}: stage {image!r} not available for evaluation")
    return ws.read(image, i)


def _pairs(entries):
    by_loc = {}
    for loc, roi in entries:
        by_loc.setdefault(loc, {"fg": [], "bg": None})
        if roi.role == "background":
            by_loc[loc]["bg"] = roi
        else:
            by_loc[loc]["fg"].append(roi)
    return {loc: d for loc, d in sorted(by_loc.items()) if d["fg"] and d["bg"] is not None}


def evaluate(ws, entries, images=DEFAULT_IMAGES, reference=None, profile=None,
             ssim_cfg=None, repeat=0):
    """Per-layer SNR/PSNR/CNR, whole-image SSIM, row profile and layer means.

    ``reference`` defaults to the phantom ground truth (``clean``) when the
    workspace has it, else the frame average ``ln``. SSIM uses the
    reference volume's intensity range unless ``ssim_cfg`` fixes one.
    """
    prev, ws.active_stage = ws.active_stage, "metrics"
    try:
        return _evaluate(ws, entries, images, reference, profile, ssim_cfg, repeat)
    finally:
        ws.active_stage = prev


def _evaluate(ws, entries, images, reference, profile, ssim_cfg, repeat):
    images = list(images)
    if reference is None:
        reference = "clean" if ws.has_stage("clean") else "ln"
    pairs = _pairs(entries)
    if not pairs:
        raise ValidationError("no location has both foreground and background ROIs")
    report = MetricsReport()
    sums = {img: {} for img in images}
    for loc, d in pairs.items():
        for img in images:
            a = read_image(ws, img, loc, repeat)
            for fg in d["fg"]:
                row = {"image": img, "location": loc, "layer": fg.layer,
                       "snr": snr(a, fg, d["bg"]), "psnr": psnr(a, fg, d["bg"]),
                       "cnr": cnr(a, fg, d["bg"]), "mean": layer_mean_intensity(a, [fg])[0]}
                report.per_slice.append(row)
                sums[img].setdefault(fg.layer, []).append(row)
    for img in images:
        report.layers[img] = {
            layer: {m: float(np.mean([r[m] for r in rows])) for m in ("snr", "psnr", "cnr")}
            for layer, rows in sums[img].items()}
        report.layer_means[img] = {layer: float(np.mean([r["mean"] for r in rows]))
                                   for layer, rows in sums[img].items()}

    refs = [read_image(ws, reference, i) for i in range(ws.n_locations)]
    if ssim_cfg is None:
        lo = min(float(r.min()) for r in refs)
        hi = max(float(r.max()) for r in refs)
        ssim_cfg = SSIMConfig(data_range=(hi - lo) or 1.0)
    for img in images:
        report.ssim[img] = float(np.mean([ssim(read_image(ws, img, i, repeat), refs[i], ssim_cfg)
                                          for i in range(ws.n_locations)]))

    if profile is not None:
        loc = int(profile["location"])
        roi = ROI(profile["top"], profile["left"], profile["height"], profile["width"])
        for img in [reference] + images:
            report.columns[img] = mean_column_intensity(
                roi.pixels(read_image(ws, img, loc, repeat))).tolist()

    report.provenance = {
        "workspace": os.path.basename(ws.root),
        "images": images,
        "reference": reference,
        "locations": sorted(pairs),
        "n_rois": len(entries),
        "ssim": ssim_cfg.to_dict(),
        "config_hash": config_hash({"ssim": ssim_cfg.to_dict(), "images": images,
                                    "reference": reference,
                                    "manifest": ws.manifest.get("config_hash", "")}),
    }
    return report


def write_columns_csv(path, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        n = max((len(v) for v in columns.values()), default=0)
        w.writerow(["image"] + [f"row{k}" for k in range(n)])
        for img, v in columns.items():
            w.writerow([img] + [repr(float(x)) for x in v])


def write_report(report, out_dir, figures=True):
    """Write ``report.json``, ``metrics.csv``, ``columns.csv`` and PNG figures."""
    os.makedirs(out_dir, exist_ok=True)
    report.save(os.path.join(out_dir, "report.json"))
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "layer", "snr_db", "psnr_db", "cnr", "ssim"])
        for img, layers in report.layers.items():
            for layer, m in layers.items():
                w.writerow([img, layer, repr(m["snr"]), repr(m["psnr"]), repr(m["cnr"]),
                            repr(report.ssim.get(img, float("nan")))])
    written = ["report.json", "metrics.csv"]
    if report.columns:
        write_columns_csv(os.path.join(out_dir, "columns.csv"), report.columns)
        written.append("columns.csv")
    if figures:
        from . import plotting
        plotting.plot_layer_metrics(report, os.path.join(out_dir, "layer_metrics.png"))
        plotting.plot_ssim(report, os.path.join(out_dir, "ssim.png"))
        plotting.plot_layer_means(report.layer_means, os.path.join(out_dir, "layer_means.png"))
        written += ["layer_metrics.png", "ssim.png", "layer_means.png"]
        if report.columns:
            plotting.plot_column_profiles(report.columns,
                                          os.path.join(out_dir, "column_profiles.png"))
            written.append("column_profiles.png")
    return written
