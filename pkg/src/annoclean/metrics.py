"""Segmentation precision (Dice, IoU, PA) and reconstruction similarity (SSIM, PSNR-HVS-M)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import convolve2d

from .exceptions import ConfigurationError, ShapeError

DEFAULT_TAU = 2.0 / 255.0
PSNR_CAP_DB = 100.0
METRIC_NAMES = ("dice", "iou", "pa", "ssim", "psnr_hvs_m")
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # Rec. 601

# Contrast-sensitivity and masking tables of the PSNR-HVS-M reference
# implementation (N. Ponomarenko, psnrhvsm.m, 2006). Index [row, col] matches
# the 8×8 DCT coefficient layout with DC at [0, 0].
CSF_COEFFICIENTS = np.array([
    [1.608443, 2.339554, 2.573509, 1.608443, 1.072295, 0.643377, 0.504610, 0.421887],
    [2.144591, 2.144591, 1.838221, 1.354478, 0.989811, 0.443708, 0.428918, 0.467911],
    [1.838221, 1.979622, 1.608443, 1.072295, 0.643377, 0.451493, 0.372972, 0.459555],
    [1.838221, 1.513829, 1.169777, 0.887417, 0.504610, 0.295806, 0.321689, 0.415082],
    [1.429727, 1.169777, 0.695543, 0.459555, 0.378457, 0.236102, 0.249855, 0.334222],
    [1.072295, 0.735288, 0.467911, 0.402111, 0.317717, 0.247453, 0.227744, 0.279729],
    [0.525206, 0.402111, 0.329937, 0.295806, 0.249855, 0.212687, 0.214459, 0.254803],
    [0.357432, 0.279729, 0.270896, 0.262603, 0.229778, 0.257351, 0.249855, 0.259950],
])
MASK_COEFFICIENTS = np.array([
    [0.390625, 0.826446, 1.000000, 0.390625, 0.173611, 0.062500, 0.038447, 0.026874],
    [0.694444, 0.694444, 0.510204, 0.277008, 0.147929, 0.029727, 0.027778, 0.033058],
    [0.510204, 0.591716, 0.390625, 0.173611, 0.062500, 0.030779, 0.021004, 0.031888],
    [0.510204, 0.346021, 0.206612, 0.118906, 0.038447, 0.013212, 0.015625, 0.026015],
    [0.308642, 0.206612, 0.073046, 0.031888, 0.021626, 0.008417, 0.009426, 0.016866],
    [0.173611, 0.081633, 0.033058, 0.024414, 0.015242, 0.009246, 0.007831, 0.011815],
    [0.041649, 0.024414, 0.016437, 0.013212, 0.009426, 0.006830, 0.006944, 0.009803],
    [0.019290, 0.011815, 0.011080, 0.010412, 0.007972, 0.010000, 0.009426, 0.010203],
])


def _same_shape(a, b, what="inputs"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool and not np.isin(m, (0, 1)).all():
        raise ConfigurationError("masks must be strictly binary (0/1)")
    return m.astype(bool)


def luma(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ LUMA_WEIGHTS


# --------------------------------------------------------------------------
# Segmentation


def extract_segmentation(inp, out, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Pixels where the restoration moved any channel by at least ``tau``."""
    inp = np.asarray(inp, dtype=np.float64)
    out = np.asarray(out, dtype=np.float64)
    _same_shape(inp, out, "input and output images")
    diff = np.abs(inp - out)
    if diff.ndim == 3:
        diff = diff.max(axis=-1)
    return (diff >= tau).astype(np.uint8)


def dice(pred, truth) -> float:
    p, t = _binary(pred), _binary(truth)
    _same_shape(p, t, "masks")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def iou(pred, truth) -> float:
    p, t = _binary(pred), _binary(truth)
    _same_shape(p, t, "masks")
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def pixel_accuracy(pred, truth) -> float:
    p, t = _binary(pred), _binary(truth)
    _same_shape(p, t, "masks")
    return float((p == t).mean())


# --------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, *, window_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained windows, computed on Rec.601 luma."""
    x, y = luma(a), luma(b)
    _same_shape(x, y, "images")
    if x.shape[0] < window_size or x.shape[1] < window_size:
        raise ShapeError(f"images {x.shape} are smaller than the {window_size}x{window_size} SSIM window")
    w = gaussian_window(window_size, sigma)[::-1, ::-1]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(z):
        return convolve2d(z, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# PSNR-HVS-M


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are basis vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT8 = dct_matrix(8)


def dct2(blocks: np.ndarray) -> np.ndarray:
    """2-D orthonormal DCT over the last two axes of (..., 8, 8) blocks."""
    return _DCT8 @ blocks @ _DCT8.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    return _DCT8.T @ coeffs @ _DCT8


def _blocks(img: np.ndarray, step: int) -> np.ndarray:
    H, W = img.shape
    tops = range(0, H - 7, step)
    lefts = range(0, W - 7, step)
    return np.stack([img[t:t + 8, l:l + 8] for t in tops for l in lefts])


def _masking_energy(blocks: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Per-block masking strength: AC energy weighted by MASK_COEFFICIENTS,
    scaled by how locally uniform the block's variance is."""
    weights = MASK_COEFFICIENTS.copy()
    weights[0, 0] = 0.0
    energy = np.sum(coeffs ** 2 * weights, axis=(-2, -1))

    def vari(z):
        # sample variance times element count, as in the reference code
        flat = z.reshape(z.shape[0], -1)
        return flat.var(axis=1, ddof=1) * flat.shape[1]

    whole = vari(blocks)
    quads = (vari(blocks[:, :4, :4]) + vari(blocks[:, :4, 4:]) +
             vari(blocks[:, 4:, :4]) + vari(blocks[:, 4:, 4:]))
    ratio = np.divide(quads, whole, out=np.zeros_like(whole), where=whole != 0)
    return np.sqrt(energy * ratio) / 32.0


def mse_hvs_m(a, b, step: int = 8) -> float:
    """Masked, CSF-weighted mean squared DCT error on the 0-255 luma scale."""
    x, y = luma(a) * 255.0, luma(b) * 255.0
    _same_shape(x, y, "images")
    if x.shape[0] < 8 or x.shape[1] < 8:
        raise ShapeError(f"images {x.shape} are smaller than one 8x8 block")
    bx, by = _blocks(x, step), _blocks(y, step)
    cx, cy = dct2(bx), dct2(by)
    mask = np.maximum(_masking_energy(bx, cx), _masking_energy(by, cy))[:, None, None]
    u = np.abs(cx - cy)
    reduced = np.maximum(u - mask / MASK_COEFFICIENTS, 0.0)
    reduced[:, 0, 0] = u[:, 0, 0]  # DC is never masked
    return float(np.sum((reduced * CSF_COEFFICIENTS) ** 2) / u.size)


def psnr_hvs_m(reference, test, step: int = 8) -> float:
    """PSNR-HVS-M in dB with ``reference`` first; capped at 100 dB."""
    mse = mse_hvs_m(reference, test, step)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0 ** 2 / mse))


# --------------------------------------------------------------------------
# Reports


def score_sample(noisy, output, clean, truth_mask, tau: float = DEFAULT_TAU) -> dict[str, float]:
    """All five metrics for one restored image (every image in linear [0, 1])."""
    seg = extract_segmentation(noisy, output, tau)
    return {
        "dice": dice(seg, truth_mask),
        "iou": iou(seg, truth_mask),
        "pa": pixel_accuracy(seg, truth_mask),
        "ssim": min(1.0, max(0.0, ssim(output, clean))),
        "psnr_hvs_m": psnr_hvs_m(clean, output),
    }


@dataclass
class MetricReport:
    """Per-metric mean and population variance over a test split."""

    mean: dict
    variance: dict
    n_samples: int
    fingerprint: str = ""
    label: str = ""
    mode: str = ""
    per_record: list = field(default_factory=list, repr=False)

    @classmethod
    def from_scores(cls, scores: list[dict], **kw) -> "MetricReport":
        if not scores:
            raise ConfigurationError("cannot aggregate an empty score list")
        mean, var = {}, {}
        for name in METRIC_NAMES:
            vals = np.array([s[name] for s in scores], dtype=np.float64)
            mean[name] = float(vals.mean())
            var[name] = float(vals.var())
        return cls(mean, var, len(scores), per_record=scores, **kw)

    def cell(self, name: str, digits: int = 3) -> str:
        return f"{self.mean[name]:.{digits}f}±{self.variance[name]:.{digits}f}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "training_mode", "metric", "mean", "variance", "n_samples", "fingerprint"])
        for name in METRIC_NAMES:
            w.writerow([self.label, self.mode, name, repr(self.mean[name]), repr(self.variance[name]),
                        self.n_samples, self.fingerprint])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"label": self.label, "mode": self.mode, "n_samples": self.n_samples,
                "fingerprint": self.fingerprint, "mean": self.mean, "variance": self.variance}


def format_table(reports: list[MetricReport], digits: int = 3) -> str:
    """Aligned text table: one row per (method, training mode), cells ``mean±var``."""
    header = ["Method", "Training Mode", "Dice", "IoU", "PA", "SSIM", "PSNR_HVS_M"]
    rows = [[r.label, r.mode] + [r.cell(n, digits) for n in METRIC_NAMES] for r in reports]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]

    def line(cells):
        return "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"

    sep = "+-" + "-+-".join("-" * w for w in widths) + "-+"
    return "\n".join([sep, line(header), sep, *[line(r) for r in rows], sep]) + "\n"


def config_fingerprint(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(model, manifest, split: str = "test", tau: float = DEFAULT_TAU, *,
             normalization=None, padding_policy: str = "reflect", batch_size: int = 8,
             label: str = "", mode: str = "") -> MetricReport:
    """Score ``model`` on every record of ``split``.

    ``model`` is a :class:`~annoclean.model.TrainedModel` or a callable
    ``predict(noisy_batch, samples) -> restored_batch`` working on N×H×W×3
    arrays in linear [0, 1]; the callable form is what the perfect-restoration
    self-test uses.
    """
    from .datagen import ChannelNormalizer, NormalizationMode, load_sample
    from .model import TrainedModel, forward

    records = manifest.split_records(split)
    if not records:
        raise ConfigurationError(f"split {split!r} is empty")

    if isinstance(model, TrainedModel):
        norm_mode = normalization or model.training_meta.get("normalization", "linear")
        norm = ChannelNormalizer(NormalizationMode.parse(norm_mode), stats=manifest.channel_stats).fit(None)
        model.network.eval()

        def predict(noisy, _samples):
            x = norm.transform(noisy.astype(np.float32)).transpose(0, 3, 1, 2)
            y = forward(model, x, padding_policy, clamp=False).transpose(0, 2, 3, 1)
            return np.clip(norm.inverse_transform(y), 0.0, 1.0)

        fp = config_fingerprint(model.spec.to_dict(), model.training_meta, manifest.fingerprint(), split, tau)
    else:
        predict = model
        fp = config_fingerprint(getattr(model, "__name__", type(model).__name__), manifest.fingerprint(), split, tau)

    scores = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        samples = [load_sample(manifest, r.record_id, "linear") for r in chunk]
        noisy = np.stack([s.noisy_a for s in samples])
        try:
            restored = np.asarray(predict(noisy, samples), dtype=np.float64)
        except ShapeError as exc:
            raise ShapeError(f"records {chunk[0].record_id}..{chunk[-1].record_id}: {exc}") from exc
        for s, out in zip(samples, restored):
            sc = score_sample(s.noisy_a, out, s.clean, s.mask_a, tau)
            sc["record_id"] = s.record_id
            scores.append(sc)
    return MetricReport.from_scores(scores, fingerprint=fp, label=label, mode=mode)


def oracle_predictor(noisy, samples):
    """Perfect restoration: returns each sample's clean image."""
    return np.stack([s.clean for s in samples])


def identity_predictor(noisy, samples):
    return np.array(noisy, copy=True)


def write_report(report: MetricReport, out_dir, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
    csv_path.write_text(report.to_csv())
    txt_path.write_text(format_table([report]))
    return csv_path, txt_path


Predictor = Callable[[np.ndarray, list], np.ndarray]
