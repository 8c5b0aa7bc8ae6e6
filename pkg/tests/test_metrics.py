import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pmfn.errors import DegenerateInputError, ValidationError
from pmfn.metrics import (ROI, MetricsReport, ROIStats, SSIMConfig, cnr, flat_snr,
                          layer_mean_intensity, matched_background, mean_column_intensity, psnr,
                          snr, ssim)


def random_roi(rng, shape, role="foreground", max_side=12):
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    top = int(rng.integers(0, shape[0] - h + 1))
    left = int(rng.integers(0, shape[1] - w + 1))
    return ROI(top, left, h, w, role)


def roi_trial(seed):
    rng = np.random.default_rng([seed, 77])
    img = rng.gamma(1.0, 1.0, (40, 50)) * rng.uniform(0.1, 5.0)
    fg = random_roi(rng, img.shape)
    bg = random_roi(rng, img.shape, "background")
    f = oracles.crop(img, fg.top, fg.left, fg.height, fg.width)
    b = oracles.crop(img, bg.top, bg.left, bg.height, bg.width)
    return img, fg, bg, f, b


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


@pytest.mark.parametrize("seed", range(100))
def test_roi_metrics_match_loop_oracles(seed):
    img, fg, bg, f, b = roi_trial(seed)
    assert rel(snr(img, fg, bg), oracles.snr(f, b)) < 1e-9
    assert rel(psnr(img, fg, bg), oracles.psnr(f, b)) < 1e-9
    if fg.area > 1 or bg.area > 1:
        assert rel(cnr(img, fg, bg), oracles.cnr(f, b)) < 1e-9
    prof = mean_column_intensity(fg.pixels(img))
    assert np.allclose(prof, oracles.column_profile(f), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("seed", range(12))
def test_ssim_matches_loop_oracle(seed):
    rng = np.random.default_rng([seed, 5])
    x = rng.uniform(0, 1, (32, 32))
    y = np.clip(x + rng.normal(0, rng.uniform(0.01, 0.5), x.shape), 0, 1)
    if seed % 3 == 0:
        y = rng.uniform(0, 1, (32, 32))
    dr = float(rng.choice([1.0, 2.0, np.ptp(np.concatenate([x, y]))]))
    got = ssim(x, y, SSIMConfig(data_range=dr))
    want = oracles.ssim(x.tolist(), y.tolist(), dr)
    assert abs(got - want) < 1e-9


def test_ssim_identity_symmetry_and_constant_pair(rng):
    x = rng.uniform(0, 1, (24, 30))
    y = rng.uniform(0, 1, (24, 30))
    assert abs(ssim(x, x) - 1.0) < 1e-12
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-12
    z = np.zeros((16, 16))
    assert ssim(z, z, SSIMConfig(data_range=1.0)) == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(0.01, 100.0))
def test_ssim_invariant_to_joint_scaling(seed, a):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (16, 16))
    y = rng.uniform(0, 1, (16, 16))
    s0 = ssim(x, y, SSIMConfig(data_range=1.0))
    s1 = ssim(a * x, a * y, SSIMConfig(data_range=a))
    assert abs(s0 - s1) < 1e-9


def test_ssim_errors():
    with pytest.raises(ValidationError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ValidationError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.floats(1e-3, 1e3), c=st.floats(-50, 50))
def test_scale_and_shift_invariances(seed, k, c):
    img, fg, bg, _, _ = roi_trial(seed)
    assert math.isclose(snr(k * img, fg, bg), snr(img, fg, bg), rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose(psnr(k * img, fg, bg), psnr(img, fg, bg), rel_tol=1e-9, abs_tol=1e-9)
    if fg.area > 1 and bg.area > 1:
        assert math.isclose(cnr(img + c, fg, bg), cnr(img, fg, bg), rel_tol=1e-7, abs_tol=1e-9)


def test_snr_hand_examples():
    img = np.ones((10, 10))
    fg = ROI(0, 0, 4, 4)
    bg = ROI(5, 5, 4, 4, "background")
    assert snr(img, fg, bg) == 0.0
    img[:4, :4] = 10.0
    assert snr(img, fg, bg) == pytest.approx(20.0, abs=1e-12)
    assert psnr(img, fg, bg) == pytest.approx(20.0, abs=1e-12)
    img2 = img.copy()
    img2[5:9, 5:9] *= 2.0
    assert psnr(img, fg, bg) - psnr(img2, fg, bg) == pytest.approx(10 * math.log10(4), abs=1e-12)


def test_constant_psnr_is_zero():
    img = np.full((6, 6), 3.0)
    assert psnr(img, ROI(0, 0, 2, 3), ROI(3, 0, 3, 3, "background")) == pytest.approx(0.0,
                                                                                     abs=1e-12)


def test_cnr_hand_examples():
    img = np.zeros((4, 8))
    img[:, :4] = [[1, 3, 1, 3]] * 4  # mean 2, population std 1
    img[:, 4:] = [[0, 2, 0, 2]] * 4  # mean 1, population std 1
    fg, bg = ROI(0, 0, 4, 4), ROI(0, 4, 4, 4, "background")
    assert cnr(img, fg, bg) == pytest.approx(1.0, abs=1e-12)
    img[:, 4:] = [[1, 3, 1, 3]] * 4
    assert cnr(img, fg, bg) == 0.0


def test_degenerate_inputs():
    img = np.ones((6, 6))
    img[3:] = 0.0
    fg, bg = ROI(0, 0, 3, 6), ROI(3, 0, 3, 6, "background")
    with pytest.raises(DegenerateInputError):
        snr(img, fg, bg)
    with pytest.raises(DegenerateInputError):
        psnr(img, fg, bg)
    with pytest.raises(DegenerateInputError):
        cnr(img, fg, bg)


def test_background_matching_crops_top_left_and_tiles():
    bg = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(matched_background(np.zeros((2, 3)), bg), bg[:2, :3])
    tiled = matched_background(np.zeros((4, 6)), bg)
    assert tiled.shape == (4, 6)
    assert tiled[3, 5] == bg[0, 1]


def test_column_intensity_examples(rng):
    assert np.array_equal(mean_column_intensity(np.full((3, 4), 2.5)), np.zeros(3))
    assert mean_column_intensity(np.array([[1.0, 3.0], [5.0, 7.0]])).tolist() == [-2.0, 2.0]
    v = mean_column_intensity(rng.standard_normal((9, 5)))
    assert abs(v.mean()) < 1e-9
    with pytest.raises(ValidationError):
        mean_column_intensity(np.zeros((0, 3)))


def test_layer_means_follow_roi_order():
    img = np.zeros((4, 4))
    img[:2] = 3.0
    img[2:] = [[1, 2, 3, 4], [5, 6, 7, 8]]
    rois = [ROI(2, 0, 2, 2, layer="b"), ROI(0, 0, 2, 4, layer="a")]
    assert layer_mean_intensity(img, rois) == [(1 + 2 + 5 + 6) / 4, 3.0]


def test_roi_validation_and_stats():
    with pytest.raises(ValidationError):
        ROI(0, 0, 0, 3)
    with pytest.raises(ValidationError):
        ROI(-1, 0, 2, 2)
    with pytest.raises(ValidationError):
        ROI(0, 0, 2, 2, role="noise")
    with pytest.raises(ValidationError):
        ROI(3, 3, 2, 2).pixels(np.zeros((4, 4)))
    s = ROIStats.of(np.array([[1.0, 3.0]]))
    assert (s.mean, s.std, s.sum_sq, s.max) == (2.0, 1.0, 10.0, 3.0)


def test_flat_snr_grows_with_averaging():
    rng = np.random.default_rng(0)
    roi = ROI(0, 0, 100, 100)
    one = rng.gamma(1.0, 1.0, (100, 100))
    avg = np.mean(rng.gamma(1.0, 1.0, (16, 100, 100)), axis=0)
    gain = flat_snr(avg, roi) - flat_snr(one, roi)
    assert gain == pytest.approx(10 * math.log10(16), abs=0.5)
    assert flat_snr(np.ones((3, 3)), ROI(0, 0, 3, 3)) == math.inf


def _report():
    rng = np.random.default_rng(3)
    return MetricsReport(
        layers={"out": {"GCL": {"snr": float(rng.normal()), "psnr": 1 / 3, "cnr": 2.0 ** -40}}},
        ssim={"out": 0.1 + 0.2, "hn": float(rng.uniform())},
        columns={"out": rng.standard_normal(7).tolist()},
        layer_means={"out": {"GCL": 0.7}},
        per_slice=[{"image": "out", "location": 0, "layer": "GCL", "snr": 1e-300}],
        provenance={"config_hash": "abc"})


def test_report_round_trip_bit_exact(tmp_path):
    r = _report()
    back = MetricsReport.from_json(r.to_json())
    assert back == r
    p = tmp_path / "r.json"
    r.save(p)
    assert MetricsReport.load(p) == r
    assert json.loads(p.read_text())["ssim"]["out"] == 0.1 + 0.2


def test_report_rejects_non_finite():
    r = _report()
    r.ssim["out"] = float("nan")
    with pytest.raises(ValidationError, match="ssim.out"):
        r.to_json()
