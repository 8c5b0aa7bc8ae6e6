"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or as part of the
full suite (the lines are written with output capture disabled).
"""

import math
import os
import time

import numpy as np
import pytest

import oracles
from gradcases import OP_CASES, worst_error
from pmfn.imgreg import DeformationField, Translation, register_deformable, register_rigid, shift, warp
from pmfn.metrics import ROI, SSIMConfig, cnr, flat_snr, mean_column_intensity, psnr, snr, ssim
from pmfn.nn import LossConfig, l1_loss, mse_loss, pmfn_loss
from pmfn.phantom import SPECKLE_OFF, apply_speckle, auto_rois, generate_phantom, retina_spec
from pmfn.pipeline import frame_average
from pmfn.selffusion import FusionParams, self_fuse

from conftest import smooth_image
from smoke import run_smoke, slice_scores


@pytest.fixture
def verdict(pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def report(number, title, ok, detail):
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return report


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------- 1

def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    errors = {name: worst_error(name, trials=20, seed=1) for name in OP_CASES}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    verdict(1, "gradient check", errors[worst] < 1e-3 and elapsed < 60,
            f"{len(errors)} ops x 20 trials, worst {worst} rel err {errors[worst]:.2e} "
            f"(< 1e-3), {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 2

def metric_trial(seed):
    rng = np.random.default_rng([seed, 2024])
    img = rng.gamma(rng.uniform(0.5, 4), 1.0, (40, 48)) * rng.uniform(0.1, 10.0)
    rois = []
    for role in ("foreground", "background"):
        h, w = (int(v) for v in rng.integers(2, 13, 2))
        rois.append(ROI(int(rng.integers(0, 40 - h + 1)), int(rng.integers(0, 48 - w + 1)),
                        h, w, role))
    fg, bg = rois
    f = oracles.crop(img, fg.top, fg.left, fg.height, fg.width)
    b = oracles.crop(img, bg.top, bg.left, bg.height, bg.width)
    errs = [rel(snr(img, fg, bg), oracles.snr(f, b)),
            rel(psnr(img, fg, bg), oracles.psnr(f, b)),
            rel(cnr(img, fg, bg), oracles.cnr(f, b))]
    prof = mean_column_intensity(fg.pixels(img))
    want = oracles.column_profile(f)
    scale = max(max(abs(v) for v in want), 1e-300)
    errs.append(max(abs(p - q) for p, q in zip(prof, want)) / scale)
    x = rng.uniform(0, 1, (20, 20))
    y = np.clip(x + rng.normal(0, rng.uniform(0.02, 0.5), x.shape), 0, 1)
    errs.append(rel(ssim(x, y, SSIMConfig(data_range=1.0)), oracles.ssim(x.tolist(), y.tolist(), 1.0)))
    return errs, abs(ssim(x, x) - 1.0)


def test_criterion_2_metric_fidelity(verdict):
    errs, ident = zip(*(metric_trial(s) for s in range(100)))
    worst = np.max(errs, axis=0)
    names = ("snr", "psnr", "cnr", "profile", "ssim")
    ok = worst.max() < 1e-9 and max(ident) <= 1e-12
    verdict(2, "metric fidelity", ok,
            "100 trials, worst rel err " + ", ".join(f"{n} {e:.1e}" for n, e in zip(names, worst))
            + f" (< 1e-9); max |ssim(x,x)-1| {max(ident):.1e} (<= 1e-12)")


# ---------------------------------------------------------------- 3

def test_criterion_3_registration(verdict):
    t0 = time.perf_counter()
    clean = generate_phantom(retina_spec(n_locations=1, n_repeats=1, speckle_looks=SPECKLE_OFF,
                                         seed=3)).clean[0]
    rng = np.random.default_rng(33)
    planted = [(10.0, -10.0), (-10.0, 0.0), (0.0, 10.0)] + [tuple(rng.uniform(-10, 10, 2))
                                                             for _ in range(37)]
    err_clean, err_speckle = [], []
    for k, (dx, dy) in enumerate(planted):
        moving = shift(clean, Translation(dx, dy))
        t = register_rigid(moving, clean, bound=12)
        err_clean.append(max(abs(t.dx - dx), abs(t.dy - dy)))
        t = register_rigid(apply_speckle(moving, 4.0, seed=k, stream=(0,)),
                           apply_speckle(clean, 4.0, seed=k, stream=(1,)), bound=12)
        err_speckle.append(max(abs(t.dx - dx), abs(t.dy - dy)))

    reductions = []
    yy, xx = np.indices(clean.shape, dtype=float)
    for fixed, phase in ((clean, 0.0), (clean, 1.3), (smooth_image((64, 64), 4, 3.0), 0.0)):
        field = DeformationField(2.0 * np.sin(2 * np.pi * yy / 32 + phase),
                                 2.0 * np.sin(2 * np.pi * xx / 32 + phase))
        moving = warp(fixed, field)
        est = register_deformable(moving, fixed)
        before = ((moving - fixed) ** 2).sum()
        after = ((warp(moving, est) - fixed) ** 2).sum()
        reductions.append(1 - after / before)
    elapsed = time.perf_counter() - t0
    ok = (max(err_clean) <= 0.5 and max(err_speckle) <= 1.0 and min(reductions) >= 0.5
          and elapsed < 120)
    verdict(3, "registration recovery", ok,
            f"{len(planted)} shifts <= 10 px: worst {max(err_clean):.2f} px clean (<= 0.5), "
            f"{max(err_speckle):.2f} px L=4 (<= 1.0); 2-px sinusoid SSD reduction min "
            f"{min(reductions):.0%} (>= 50%); {elapsed:.1f} s (< 120 s)")


# ---------------------------------------------------------------- 4

def test_criterion_4_self_fusion_gain(verdict):
    spec = retina_spec(n_locations=15, n_repeats=1, speckle_looks=1.0, anatomy_drift=0.0,
                       texture=0.0, seed=11)
    vol = generate_phantom(spec)
    stack = [frames[0] for frames in vol.frames]
    fused = self_fuse(stack, 7, FusionParams(radius=7))
    plain = np.mean(stack, axis=0)
    rois = [ROI.from_dict(r) for r in auto_rois(spec, n_slices=15)
            if r["location"] == 7 and r["role"] == "foreground"]
    gains = [flat_snr(fused, r) - flat_snr(stack[7], r) for r in rois]
    oracle = [flat_snr(plain, r) - flat_snr(stack[7], r) for r in rois]
    gain = float(np.mean(gains))
    verdict(4, "self-fusion gain", gain >= 6.0,
            f"r=7 over {len(rois)} layer ROIs: mean {gain:.2f} dB (>= 6 dB), range "
            f"{min(gains):.1f}..{max(gains):.1f} dB; plain-mean oracle {np.mean(oracle):.2f} dB "
            f"(theory {10 * math.log10(15):.2f} dB)")


# ---------------------------------------------------------------- 5

def averaging_ratio(jitter, seed):
    vol = generate_phantom(retina_spec(n_locations=1, n_repeats=5, speckle_looks=1.0,
                                       inter_frame_jitter=jitter, seed=seed))
    frames, clean = vol.frames[0], vol.clean[0]
    m = slice(6, -6)
    avg = frame_average(frames, bound=8)
    return float(np.var((avg - clean)[m, m]) / np.var((frames[0] - clean)[m, m]))


def test_criterion_5_frame_averaging(verdict):
    still = [averaging_ratio(0, 50 + s) for s in range(5)]
    moved = [averaging_ratio(4, 50 + s) for s in range(5)]
    r0, r4 = float(np.mean(still)), float(np.mean(moved))
    ok = r0 <= 0.3 and r4 <= 1.2 * r0
    verdict(5, "frame averaging", ok,
            f"residual variance ratio {r0:.3f} without jitter (<= 0.3, plain mean 0.2), "
            f"{r4:.3f} with <= 4 px jitter (<= 1.2 x {r0:.3f} = {1.2 * r0:.3f})")


# ---------------------------------------------------------------- 6

def test_criterion_6_training_smoke(smoke, verdict):
    ws = smoke["test"]
    n = ws.n_locations
    l1_pseudo = np.mean([np.abs(ws.read("pseudo", i) - ws.read("sf", i)).mean() for i in range(n)])
    l1_raw = np.mean([np.abs(ws.read("pre", f"{i}:0") - ws.read("sf", i)).mean() for i in range(n)])
    s_hn, s_out, s_base = (slice_scores(ws, k).mean() for k in ("hn", "out", "out_baseline"))
    cpu = smoke["cpu"]
    a, b, c = l1_pseudo < l1_raw, s_out > s_hn, s_out >= s_base
    verdict(6, "training smoke", a and b and c and cpu <= 600,
            f"(a) L1 to S: pseudo {l1_pseudo:.4f} vs raw {l1_raw:.4f} [{'ok' if a else 'no'}]; "
            f"(b) SSIM out {s_out:.3f} vs noisy {s_hn:.3f} [{'ok' if b else 'no'}]; "
            f"(c) out {s_out:.3f} vs baseline {s_base:.3f} [{'ok' if c else 'no'}]; "
            f"{cpu:.0f} s CPU (<= 600 s)")


# ---------------------------------------------------------------- 7

def test_criterion_7_dual_loss(verdict):
    p, y, s = np.array([[[2.0]]]), np.array([[[1.0]]]), np.array([[[0.0]]])
    literal = float(pmfn_loss(p, y, s, LossConfig(alpha=1.0, beta=1.2)).data)
    rng = np.random.default_rng(7)
    deg = 0.0
    for _ in range(20):
        p, y, s = (rng.standard_normal((1, 6, 5)) for _ in range(3))
        mse = float(pmfn_loss(p, y, s, LossConfig(alpha=0.0, beta=1.0)).data)
        l1 = float(pmfn_loss(p, y, s, LossConfig(alpha=1.0, beta=0.0)).data)
        deg = max(deg, rel(mse, float(np.mean((p - s) ** 2))), rel(l1, float(np.abs(p - y).sum())),
                  rel(mse, float(mse_loss(p, s).data)), rel(l1, float(l1_loss(p, y).data)))
    ok = literal == 5.8 and deg < 1e-12
    verdict(7, "dual loss", ok,
            f"literal example {literal!r} (== 5.8); alpha=0 / beta=0 vs MSE / L1 oracles "
            f"worst rel err {deg:.1e}")


# ---------------------------------------------------------------- 8

def tree_bytes(root, names):
    out = {}
    for name in names:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            continue
        if os.path.isdir(path):
            for sub in sorted(os.listdir(path)):
                with open(os.path.join(path, sub), "rb") as f:
                    out[f"{name}/{sub}"] = f.read()
        else:
            with open(path, "rb") as f:
                out[name] = f.read()
    return out


def test_criterion_8_determinism(smoke, tmp_path_factory, verdict):
    again = run_smoke(str(tmp_path_factory.mktemp("rerun")))
    first, second = {}, {}
    for tag, res, into in (("a", smoke, first), ("b", again, second)):
        for ws in (res["train"], res["test"]):
            base = os.path.basename(ws.root)
            for k, v in tree_bytes(ws.root, ["manifest.json", "checkpoints"]).items():
                if not k.endswith(".png"):
                    into[f"{base}/{k}"] = v
        into["report.json"] = tree_bytes(os.path.join(res["root"], "report"), ["report.json"])[
            "report.json"]
    differ = sorted(k for k in first if first[k] != second.get(k))
    ok = set(first) == set(second) and not differ
    verdict(8, "determinism", ok,
            f"{len(first)} files compared (manifests, checkpoints, loss logs, report), "
            + ("all byte-identical" if ok else f"differing: {differ or 'file sets'}"))
