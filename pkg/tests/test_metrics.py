import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flowinv.metrics import PSNR_CAP, RegionReport, attribute_score, mse, psnr, psnr_from_mse, region_report, ssim
from flowinv.training import color_channel, gen_shapes_dataset

from oracles import mse_two_pass, ssim_loops

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_mse_examples(rng):
    a = rng.random((3, 5, 5))
    assert mse(a, a) == 0.0
    assert mse(a + 0.1, a) == pytest.approx(0.01, rel=1e-12)
    b = rng.random((3, 5, 5))
    assert mse(a, b) == pytest.approx(mse_two_pass(a, b), rel=1e-12)
    with pytest.raises(ValueError):
        mse(a, b[:, :4])


def test_psnr_examples(rng):
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    assert psnr_from_mse(1.0) == 0.0
    a = rng.random((1, 4, 4))
    assert psnr(a, a) == PSNR_CAP
    with pytest.raises(ValueError):
        psnr(a, a[:, :2])


@given(st.floats(1e-12, 10.0), st.floats(1e-12, 10.0))
def test_psnr_monotone(e1, e2):
    if e1 < e2 and psnr_from_mse(e1) < PSNR_CAP:
        assert psnr_from_mse(e1) > psnr_from_mse(e2)


def test_ssim_identical_and_inverted():
    s = gen_shapes_dataset(3, 5)[0]
    assert ssim(s.image, s.image) == pytest.approx(1.0, abs=1e-15)
    binary = (s.region_mask[None] * np.ones((3, 1, 1))).astype(float)
    assert ssim(binary, 1.0 - binary) < 0


def test_ssim_matches_scalar_loop_oracle():
    a, b = (s.image for s in gen_shapes_dataset(2, 11))
    assert ssim(a, b) == pytest.approx(ssim_loops(a, b), abs=1e-9)
    noisy = np.clip(a + 0.05 * np.random.default_rng(0).standard_normal(a.shape), 0, 1)
    assert ssim(a, noisy) == pytest.approx(ssim_loops(a, noisy), abs=1e-9)


def test_ssim_frozen_value():
    # computed once with the scalar-loop oracle, then frozen
    a, b = (s.image for s in gen_shapes_dataset(2, 11))
    assert ssim(a, b) == pytest.approx(-0.0756740318708727, abs=1e-12)


@given(arrays(np.float64, (2, 10, 12), elements=unit), arrays(np.float64, (2, 10, 12), elements=unit))
def test_ssim_properties(a, b):
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


def test_ssim_accepts_single_channel_and_rejects_small(rng):
    a = rng.random((9, 9))
    assert ssim(a, a) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ssim(rng.random((3, 7, 20)), rng.random((3, 7, 20)))


def _recolor(sample, target_color):
    out = sample.image.copy()
    src = color_channel(sample.condition)
    out[:, sample.region_mask] = 0.1
    out[target_color, sample.region_mask] = 0.9
    return out, src


def test_region_report_unchanged_image():
    s = gen_shapes_dataset(1, 3)[0]
    src = color_channel(s.condition)
    tgt = (src + 1) % 3
    rep = region_report(s.image, s.image, s.region_mask, src, tgt)
    assert rep.bg_psnr == PSNR_CAP and rep.bg_mse == 0.0 and rep.bg_ssim == pytest.approx(1.0)
    assert rep.edit_score == pytest.approx(attribute_score(s.image, s.region_mask, src, tgt))
    assert rep.edit_score < 0


def test_region_report_perfect_recolor():
    s = gen_shapes_dataset(1, 4)[0]
    tgt = (color_channel(s.condition) + 2) % 3
    edited, src = _recolor(s, tgt)
    rep = region_report(s.image, edited, s.region_mask, src, tgt)
    assert rep.bg_mse == 0.0 and rep.edit_score > 0
    assert rep.edit_score == pytest.approx(0.8)


def test_region_report_errors():
    s = gen_shapes_dataset(1, 4)[0]
    with pytest.raises(ValueError):
        region_report(s.image, s.image, np.ones((24, 24), dtype=bool), 0, 1)
    with pytest.raises(ValueError):
        region_report(s.image, s.image, np.zeros((24, 24), dtype=bool), 0, 1)
    with pytest.raises(ValueError):
        region_report(s.image, s.image, np.zeros((12, 24), dtype=bool), 0, 1)


@given(arrays(np.float64, (3, 8, 8), elements=st.floats(-3, 3)))
def test_attribute_score_bounded(img):
    region = np.zeros((8, 8), dtype=bool)
    region[2:6, 1:5] = True
    assert -1.0 <= attribute_score(img, region, 0, 2) <= 1.0


def test_report_columns():
    rep = RegionReport(0.1, 10.0, 0.9, 0.5)
    assert RegionReport.columns() == ["bg_mse", "bg_psnr", "bg_ssim", "edit_score"]
    assert rep.row() == [0.1, 10.0, 0.9, 0.5]
    assert rep.as_dict()["edit_score"] == 0.5
