"""Training objectives. Every loss returns ``(value, grad_wrt_pred)``.

All losses operate on normalized ``[0, 1]`` NCHW arrays and are means over
elements, so their weights stay comparable across patch sizes.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

DCT_BLOCK = 8


@dataclass(frozen=True)
class LossWeights:
    w_char: float = 1.0
    w_dct: float = 0.02
    w_kd: float = 0.03
    eps_char: float = 1e-3
    gamma: float = 10.0
    w_min: float = 0.10
    w_max: float = 0.75

    def __post_init__(self):
        if min(self.w_char, self.w_dct, self.w_kd, self.eps_char, self.gamma) < 0:
            raise InvalidArgument("loss weights must be non-negative")
        if not 0 < self.w_min <= self.w_max <= 1:
            raise InvalidArgument(f"need 0 < w_min <= w_max <= 1, got {self.w_min}, {self.w_max}")


STAGE2_WEIGHTS = LossWeights(w_dct=0.02, w_kd=0.03)
STAGE3_WEIGHTS = LossWeights(w_dct=0.015, w_kd=0.03)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgument(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _same_shape(pred, target, "l1_loss")
    d = pred - target
    return float(np.abs(d).mean()), (np.sign(d) / d.size).astype(pred.dtype)


def charbonnier_loss(pred: np.ndarray, target: np.ndarray, eps: float = 1e-3) -> tuple[float, np.ndarray]:
    """Mean of ``sqrt(d^2 + eps^2)``."""
    _same_shape(pred, target, "charbonnier_loss")
    if eps <= 0:
        raise InvalidArgument(f"charbonnier eps must be positive, got {eps}")
    d = pred - target
    r = np.sqrt(d * d + eps * eps)
    return float(r.mean()), (d / r / d.size).astype(pred.dtype)


@functools.lru_cache(maxsize=None)
def dct_matrix(n: int = DCT_BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis; row ``k`` is frequency ``k``."""
    k = np.arange(n).reshape(-1, 1)
    i = np.arange(n).reshape(1, -1)
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2_block(block: np.ndarray) -> np.ndarray:
    """2-D orthonormal DCT of the trailing two axes (``D X D^T``)."""
    d = dct_matrix(block.shape[-1])
    return d @ block @ d.T


def idct2_block(coeffs: np.ndarray) -> np.ndarray:
    d = dct_matrix(coeffs.shape[-1])
    return d.T @ coeffs @ d


def _reflect_index(n: int, block: int) -> np.ndarray:
    pad = (-n) % block
    return np.pad(np.arange(n), (0, pad), mode="reflect") if pad else np.arange(n)


def _to_blocks(x: np.ndarray, rows: np.ndarray, cols: np.ndarray, b: int) -> np.ndarray:
    xp = x[:, :, rows][:, :, :, cols]
    n, c, h, w = xp.shape
    return xp.reshape(n, c, h // b, b, w // b, b).transpose(0, 1, 2, 4, 3, 5)


def dct_loss(pred: np.ndarray, target: np.ndarray, block: int = DCT_BLOCK) -> tuple[float, np.ndarray]:
    """Mean absolute difference of blockwise DCT coefficients.

    Images are reflect-padded at the bottom/right to a multiple of ``block``.
    The transform is linear, so only the difference image is transformed; the
    gradient is the inverse transform of the sign field, scattered back through
    the padding.
    """
    _same_shape(pred, target, "dct_loss")
    n, c, h, w = pred.shape
    rows, cols = _reflect_index(h, block), _reflect_index(w, block)
    d = dct_matrix(block).astype(pred.dtype)
    blocks = _to_blocks(pred - target, rows, cols, block)
    coeffs = d @ blocks @ d.T
    count = coeffs.size
    value = float(np.abs(coeffs).mean())
    g_blocks = d.T @ (np.sign(coeffs) / count).astype(pred.dtype) @ d
    hb, wb = len(rows) // block, len(cols) // block
    g_pad = g_blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hb * block, wb * block)
    g_rows = np.zeros((n, c, h, g_pad.shape[3]), dtype=pred.dtype)
    np.add.at(g_rows, (slice(None), slice(None), rows), g_pad)
    grad = np.zeros_like(pred)
    np.add.at(grad, (slice(None), slice(None), slice(None), cols), g_rows)
    return value, grad


def confidence_weights(
    teacher: np.ndarray,
    target: np.ndarray,
    gamma: float = 10.0,
    w_min: float = 0.10,
    w_max: float = 0.75,
) -> np.ndarray:
    """Per-pixel distillation weight ``clip(exp(-gamma * e), w_min, w_max)``,
    where ``e`` is the channel-mean teacher error. Shape ``(N, 1, H, W)``."""
    _same_shape(teacher, target, "confidence_weights")
    e = np.abs(teacher - target).mean(axis=1, keepdims=True)
    return np.clip(np.exp(-gamma * e), w_min, w_max).astype(teacher.dtype)


def kd_loss(pred: np.ndarray, teacher: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Confidence-weighted L1 to the teacher; ``weights`` is treated as a constant."""
    _same_shape(pred, teacher, "kd_loss")
    if weights.shape != (pred.shape[0], 1) + pred.shape[2:]:
        raise InvalidArgument(f"kd_loss: weight map {weights.shape} does not match {pred.shape}")
    d = pred - teacher
    return float((weights * np.abs(d)).mean()), (weights * np.sign(d) / d.size).astype(pred.dtype)


def kd_lambda(step: int, total: int, start: float = 0.03, end: float = 0.01) -> float:
    """Stage-3 distillation weight: linear from ``start`` at step 0 to ``end`` at ``total``."""
    if total <= 0:
        return start
    t = min(max(step / total, 0.0), 1.0)
    return start + (end - start) * t


def stage_loss(
    stage: int,
    pred: np.ndarray,
    target: np.ndarray,
    teacher: np.ndarray | None = None,
    weights: LossWeights | None = None,
    step: int = 0,
    total_steps: int = 0,
    kd_end: float = 0.01,
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Composite objective for one training stage.

    Returns ``(total, grad, components)``; components hold each raw term and
    the distillation weight actually used.
    """
    if stage == 1:
        value, grad = l1_loss(pred, target)
        return value, grad, {"l1": value}
    if stage not in (2, 3):
        raise InvalidArgument(f"unknown stage {stage}")
    if teacher is None:
        raise InvalidArgument(f"stage {stage} loss requires teacher predictions")
    if weights is None:
        weights = STAGE2_WEIGHTS if stage == 2 else STAGE3_WEIGHTS
    lam = weights.w_kd if stage == 2 else kd_lambda(step, total_steps, weights.w_kd, kd_end)
    lc, gc = charbonnier_loss(pred, target, weights.eps_char)
    ld, gd = dct_loss(pred, target)
    w = confidence_weights(teacher, target, weights.gamma, weights.w_min, weights.w_max)
    lk, gk = kd_loss(pred, teacher, w)
    total = weights.w_char * lc + weights.w_dct * ld + lam * lk
    grad = weights.w_char * gc + weights.w_dct * gd + lam * gk
    return total, grad.astype(pred.dtype), {"char": lc, "dct": ld, "kd": lk, "lambda_kd": lam}
