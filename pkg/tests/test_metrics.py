import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.fft import dctn, idctn

from annoclean.exceptions import ShapeError
from oracles import brute_counts, brute_ssim

from annoclean.metrics import (
    CSF_COEFFICIENTS,
    DEFAULT_TAU,
    MetricReport,
    dct2,
    dice,
    extract_segmentation,
    format_table,
    idct2,
    iou,
    pixel_accuracy,
    psnr_hvs_m,
    ssim,
)


def mask(cells, shape=(4, 4)):
    m = np.zeros(shape, dtype=np.uint8)
    for r, c in cells:
        m[r, c] = 1
    return m


class TestSegmentation:
    def test_identity_gives_empty_mask(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert extract_segmentation(img, img).sum() == 0

    def test_single_pixel_over_threshold(self):
        a = np.full((5, 5, 3), 0.5)
        b = a.copy()
        b[2, 3, 1] += 10 / 255
        seg = extract_segmentation(a, b, 2 / 255)
        assert seg.sum() == 1 and seg[2, 3] == 1

    def test_uniform_difference_against_threshold(self):
        a = np.full((6, 6, 3), 100 / 255)
        b = np.full((6, 6, 3), 101 / 255)
        assert extract_segmentation(a, b, 2 / 255).sum() == 0
        assert extract_segmentation(a, b, 0.5 / 255).sum() == 36

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            extract_segmentation(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 0.5), st.floats(0, 0.5))
    def test_monotone_in_tau(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        m_lo, m_hi = extract_segmentation(a, b, lo), extract_segmentation(a, b, hi)
        assert np.all(m_hi <= m_lo)


class TestOverlapScores:
    def test_dice_examples(self):
        truth = mask([(0, 0), (1, 1)])
        assert dice(truth, truth) == 1.0
        assert dice(mask([(0, 0)]), mask([(3, 3)])) == 0.0
        assert dice(mask([(0, 0), (0, 1)]), mask([(0, 1), (0, 2)])) == 0.5

    def test_iou_examples(self):
        truth = mask([(2, 2)])
        assert iou(truth, truth) == 1.0
        assert iou(mask([(0, 0), (0, 1)]), mask([(0, 1), (0, 2)])) == pytest.approx(1 / 3, abs=0)

    def test_empty_conventions(self):
        empty = np.zeros((4, 4), np.uint8)
        assert dice(empty, empty) == 1.0 and iou(empty, empty) == 1.0
        assert dice(empty, mask([(1, 1)])) == 0.0 and iou(empty, mask([(1, 1)])) == 0.0

    def test_pixel_accuracy_examples(self):
        truth = mask([(0, 0), (3, 2)])
        assert pixel_accuracy(truth, truth) == 1.0
        assert pixel_accuracy(mask([(0, 0)]), truth) == 15 / 16
        assert pixel_accuracy(np.ones((4, 4), np.uint8), np.zeros((4, 4), np.uint8)) == 0.0

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            dice(np.full((2, 2), 2), np.ones((2, 2)))

    def test_against_set_counting(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            p = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
            t = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
            tp, fp, fn, tn = brute_counts(p, t)
            d = Fraction(2 * tp, 2 * tp + fp + fn) if tp + fp + fn else Fraction(1)
            j = Fraction(tp, tp + fp + fn) if tp + fp + fn else Fraction(1)
            assert dice(p, t) == float(d)
            assert iou(p, t) == float(j)
            assert pixel_accuracy(p, t) == float(Fraction(tp + tn, 256))
            assert d == 2 * j / (1 + j)  # exact in rationals
            assert abs(dice(p, t) - 2 * iou(p, t) / (1 + iou(p, t))) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, (6, 6), elements=st.integers(0, 1)), arrays(np.uint8, (6, 6), elements=st.integers(0, 1)))
    def test_symmetric(self, p, t):
        assert dice(p, t) == dice(t, p)
        assert iou(p, t) == iou(t, p)
        assert pixel_accuracy(p, t) == pixel_accuracy(t, p)


class TestSSIM:
    def test_identical(self):
        img = np.random.default_rng(1).random((20, 20, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_black_vs_white_closed_form(self):
        c1 = 1e-4
        assert ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) == pytest.approx(c1 / (1 + c1), rel=1e-9)

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
            assert abs(ssim(a, b) - brute_ssim(a, b)) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


class TestDCT:
    def test_matches_scipy(self):
        x = np.random.default_rng(5).normal(size=(7, 8, 8))
        np.testing.assert_allclose(dct2(x), dctn(x, axes=(-2, -1), norm="ortho"), atol=1e-12)

    def test_round_trip_and_parseval(self):
        x = np.random.default_rng(6).normal(size=(50, 8, 8)) * 100
        assert np.abs(idct2(dct2(x)) - x).max() < 1e-10
        np.testing.assert_allclose(idctn(dct2(x), axes=(-2, -1), norm="ortho"), x, atol=1e-10)
        assert abs((dct2(x) ** 2).sum() - (x ** 2).sum()) <= 1e-8 * (x ** 2).sum()


class TestPSNRHVSM:
    def test_identical_is_capped(self):
        img = np.random.default_rng(7).random((32, 32, 3))
        assert psnr_hvs_m(img, img) == 100.0

    def test_decreasing_in_noise_amplitude(self):
        rng = np.random.default_rng(8)
        base = rng.random((64, 64, 3)) * 0.6 + 0.2
        noise = rng.standard_normal((64, 64, 3))
        scores = [psnr_hvs_m(base, base + amp / 255 * noise) for amp in (2, 4, 8)]
        assert scores[0] > scores[1] > scores[2]

    def test_dc_shift_in_flat_block(self):
        # flat 16x16 image, second image offset by c grey levels inside the top-left block only;
        # the only DCT difference is that block's DC term, 8 * c (orthonormal scaling)
        a = np.full((16, 16, 3), 100 / 255)
        b = a.copy()
        c = 3.0
        b[:8, :8] += c / 255
        n_coeffs = 4 * 64
        expected = 10 * math.log10(255 ** 2 / ((8 * c * CSF_COEFFICIENTS[0, 0]) ** 2 / n_coeffs))
        assert psnr_hvs_m(a, b) == pytest.approx(expected, rel=1e-9)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            psnr_hvs_m(np.zeros((7, 9, 3)), np.zeros((7, 9, 3)))

    def test_pure(self):
        rng = np.random.default_rng(9)
        a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
        assert psnr_hvs_m(a, b) == psnr_hvs_m(a, b)


def test_report_aggregation_and_table():
    scores = [
        {"dice": 1.0, "iou": 1.0, "pa": 1.0, "ssim": 1.0, "psnr_hvs_m": 100.0},
        {"dice": 0.5, "iou": 1 / 3, "pa": 0.9, "ssim": 0.8, "psnr_hvs_m": 40.0},
    ]
    rep = MetricReport.from_scores(scores, label="Custom U-Net", mode="N2N")
    assert rep.mean["dice"] == 0.75 and rep.variance["dice"] == 0.0625
    assert rep.n_samples == 2
    table = format_table([rep])
    assert "Custom U-Net" in table and "0.750±0.062" in table and "PSNR_HVS_M" in table
    assert rep.to_csv().splitlines()[0].startswith("method,training_mode,metric,mean,variance")


def test_paper_anchor_row_format():
    rep = MetricReport({"dice": 0.712, "iou": 0.596, "pa": 0.993, "ssim": 0.967, "psnr_hvs_m": 41.628},
                       {"dice": 0.053, "iou": 0.058, "pa": 0.007, "ssim": 0.0, "psnr_hvs_m": 41.775},
                       n_samples=1, label="Custom U-Net", mode="N2N")
    row = format_table([rep]).splitlines()[3]
    for cell in ("0.712±0.053", "0.596±0.058", "0.967±0.000", "41.628±41.775"):
        assert cell in row


def test_default_tau():
    assert DEFAULT_TAU == 2 / 255
