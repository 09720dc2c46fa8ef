"""Image-quality metrics and dataset-level evaluation reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import ImagePair, bicubic_upscale, denormalize, normalize
from .errors import InvalidArgument
from .graph import DeployGraph, integer_infer, quantize_input
from .model import DeployModel
from .quant import QatModel, dequantize

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MODES = ("fp32", "fakequant", "int8", "bicubic")
REPORT_HEADER = ("image", "mode", "psnr", "ssim")


def psnr_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB of two ``[0, 1]`` images over all pixels and channels (peak 1)."""
    if a.shape != b.shape:
        raise InvalidArgument(f"psnr_rgb: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean(np.square(a.astype(np.float64) - b.astype(np.float64))))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1-D Gaussian taps normalized to sum 1; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-region filtering of the last two axes."""
    k = g.size
    x = sliding_window_view(x, k, axis=-1) @ g
    x = sliding_window_view(x, k, axis=-2) @ g
    return x


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM of two ``(C, H, W)`` images: Gaussian 11x11 window, no padding,
    map mean per channel, then mean over channels."""
    if a.shape != b.shape:
        raise InvalidArgument(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise InvalidArgument(f"ssim: image {a.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    g = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean((num / den).reshape(a.shape[0], -1).mean(axis=1)))


@dataclass
class MetricReport:
    mode: str
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def mean_psnr(self) -> float:
        return math.fsum(self.psnr) / len(self.psnr)

    @property
    def mean_ssim(self) -> float:
        return math.fsum(self.ssim) / len(self.ssim)

    def add(self, image_id: str, p: float, s: float) -> None:
        self.ids.append(image_id)
        self.psnr.append(p)
        self.ssim.append(s)

    def rows(self) -> list[tuple[str, str, str, str]]:
        rows = [(i, self.mode, f"{p:.6f}", f"{s:.6f}") for i, p, s in zip(self.ids, self.psnr, self.ssim)]
        rows.append(("mean", self.mode, f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"))
        return rows

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            w.writerows(self.rows())


def predict_uint8(model, lr: np.ndarray, mode: str) -> np.ndarray:
    """Super-resolve one ``(3, H, W)`` uint8 image into a ``(3, 3H, 3W)`` uint8 image."""
    if mode == "bicubic":
        return bicubic_upscale(lr)
    x = normalize(lr)[None]
    if mode == "fp32":
        if not isinstance(model, DeployModel):
            raise InvalidArgument(f"fp32 mode needs a fused DeployModel, got {type(model).__name__}")
        y = model.forward(x, clamp=True)
    elif mode == "fakequant":
        if not isinstance(model, QatModel):
            raise InvalidArgument(f"fakequant mode needs a QatModel, got {type(model).__name__}")
        with model.no_observe():
            y = model.forward(x, clamp=True)
    elif mode == "int8":
        if not isinstance(model, DeployGraph):
            raise InvalidArgument(f"int8 mode needs a DeployGraph, got {type(model).__name__}")
        codes = integer_infer(model, quantize_input(model, x))
        y = np.clip(dequantize(codes, model.output_qparams), 0.0, 1.0)
    else:
        raise InvalidArgument(f"unknown evaluation mode {mode!r}; expected one of {MODES}")
    return denormalize(y[0])


def evaluate(model, pairs: Sequence[ImagePair], mode: str) -> MetricReport:
    """Full-image metrics of ``model`` on ``pairs``, measured on 8-bit outputs."""
    if not pairs:
        raise InvalidArgument("evaluate: dataset is empty")
    if mode not in MODES:
        raise InvalidArgument(f"unknown evaluation mode {mode!r}; expected one of {MODES}")
    report = MetricReport(mode)
    for pair in pairs:
        out = predict_uint8(model, pair.lr, mode)
        a = out.astype(np.float64) / 255.0
        b = pair.hr.astype(np.float64) / 255.0
        report.add(pair.id, psnr_rgb(a, b), ssim(a, b))
    return report
