"""Dense NCHW tensor operators with hand-written reverse-mode gradients.

Activations are plain ``numpy`` arrays of shape ``(N, C, H, W)``. Model
storage is float32; every operator preserves the dtype of its inputs so that
gradient checks can run the same code in float64.

Convolution is cross-correlation (no kernel flip), stride 1, "same" padding
``(k - 1) // 2``. It is lowered to a single im2col GEMM per call, which fixes
the accumulation order for a given BLAS build and thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgument, InvalidState

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

BN_MODES = ("train", "eval", "recalibrate")


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise InvalidArgument(f"conv weight must be (C_out, C_in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] % 2 == 0:
            raise InvalidArgument(f"kernel size must be odd, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise InvalidArgument(
                f"conv bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), self.bias.copy())


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    # batches folded into the running stats since the last recalibration reset
    num_batches_tracked: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise InvalidArgument(f"BN eps must be positive, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise InvalidArgument(f"BN momentum must be in (0, 1], got {self.momentum}")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BNParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def reset_running_stats(self) -> None:
        self.running_mean[...] = 0
        self.running_var[...] = 1
        self.num_batches_tracked = 0

    def copy(self) -> "BNParams":
        return BNParams(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.eps,
            self.momentum,
            self.num_batches_tracked,
        )


def _check_nchw(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise InvalidArgument(f"{what} must be rank-4 (N, C, H, W), got shape {x.shape}")


# -- convolution ------------------------------------------------------------


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Lower ``x`` to a ``(C*k*k, N*H*W)`` patch matrix for same-padded conv."""
    n, c, h, w = x.shape
    if k == 1:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to NCHW."""
    n, c, h, w = shape
    if k == 1:
        return np.ascontiguousarray(cols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    p = (k - 1) // 2
    g = cols.reshape(c, k, k, n, h, w)
    gp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            gp[:, :, i : i + h, j : j + w] += g[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gp[:, :, p : p + h, p : p + w])


def _check_conv(x: np.ndarray, p: ConvParams) -> None:
    _check_nchw(x)
    if x.shape[1] != p.in_channels:
        raise InvalidArgument(
            f"conv2d: input shape {x.shape} incompatible with weight shape {p.weight.shape}"
        )


def conv2d_with_cols(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, np.ndarray]:
    """Forward convolution that also returns the im2col matrix for reuse in backward."""
    _check_conv(x, p)
    n, _, h, w = x.shape
    k = p.kernel_size
    cols = im2col(x, k)
    wmat = p.weight.reshape(p.out_channels, -1)
    y = wmat @ cols
    y += p.bias.reshape(-1, 1)
    y = y.reshape(p.out_channels, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), cols


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Same-size 2-D cross-correlation: ``(N, C_in, H, W) -> (N, C_out, H, W)``."""
    return conv2d_with_cols(x, p)[0]


def conv2d_grad(
    x: np.ndarray,
    p: ConvParams,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d(x, p))`` w.r.t. ``x``, weight and bias."""
    _check_conv(x, p)
    n, _, h, w = x.shape
    expected = (n, p.out_channels, h, w)
    if grad_out.shape != expected:
        raise InvalidArgument(f"conv2d_grad: grad_out shape {grad_out.shape} != output shape {expected}")
    k = p.kernel_size
    if cols is None:
        cols = im2col(x, k)
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(p.out_channels, -1)
    grad_w = (g @ cols.T).reshape(p.weight.shape)
    grad_b = g.sum(axis=1)
    grad_x = None
    if need_input_grad:
        wmat = p.weight.reshape(p.out_channels, -1)
        grad_x = col2im(wmat.T @ g, x.shape, k)
    return grad_x, grad_w, grad_b


# -- batch normalization ----------------------------------------------------


def batch_norm(
    x: np.ndarray,
    p: BNParams,
    mode: str = "eval",
    cache: dict | None = None,
) -> np.ndarray:
    """Per-channel batch normalization.

    ``train`` normalizes with batch statistics and folds them into the running
    stats with ``p.momentum``. ``recalibrate`` also uses batch statistics but
    replaces the running stats with the cumulative average over all batches
    seen since the last :meth:`BNParams.reset_running_stats`. ``eval`` uses the
    running stats. When ``cache`` is given it receives what
    :func:`batch_norm_grad` needs.
    """
    _check_nchw(x)
    if mode not in BN_MODES:
        raise InvalidArgument(f"unknown batch_norm mode {mode!r}")
    if x.shape[1] != p.channels:
        raise InvalidArgument(f"batch_norm: input has {x.shape[1]} channels, params have {p.channels}")
    shape = (1, -1, 1, 1)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        x_hat = (x - p.running_mean.reshape(shape)) * inv_std.reshape(shape)
    else:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + p.eps)
        x_hat = centered * inv_std.reshape(shape).astype(x.dtype)
        unbiased = var * (m / max(m - 1, 1))
        if mode == "train":
            mom = p.momentum
        else:
            p.num_batches_tracked += 1
            mom = 1.0 / p.num_batches_tracked
        p.running_mean[...] = (1 - mom) * p.running_mean + mom * mean
        p.running_var[...] = (1 - mom) * p.running_var + mom * unbiased
    y = x_hat * p.gamma.reshape(shape) + p.beta.reshape(shape)
    if cache is not None and mode != "recalibrate":
        cache["x_hat"] = x_hat
        cache["inv_std"] = inv_std
        cache["mode"] = mode
    return y


def batch_norm_grad(
    grad_out: np.ndarray,
    p: BNParams,
    cache: dict,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_x, grad_gamma, grad_beta)`` for a cached :func:`batch_norm` call."""
    if not cache or "x_hat" not in cache:
        raise InvalidState("batch_norm_grad called without cached forward statistics")
    x_hat = cache["x_hat"]
    if grad_out.shape != x_hat.shape:
        raise InvalidArgument(f"batch_norm_grad: grad_out {grad_out.shape} != input {x_hat.shape}")
    shape = (1, -1, 1, 1)
    inv_std = cache["inv_std"]
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (p.gamma * inv_std).reshape(shape)
    if cache["mode"] == "eval":
        return grad_out * scale, grad_gamma, grad_beta
    m = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
    grad_x = scale * (
        grad_out
        - (grad_beta / m).reshape(shape)
        - x_hat * (grad_gamma / m).reshape(shape)
    )
    return grad_x, grad_gamma, grad_beta


# -- pointwise and rearrangement ops -----------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """``(N, C*r*r, H, W) -> (N, C, r*H, r*W)`` with
    ``out[n, c, r*i + a, r*j + b] = in[n, c*r*r + a*r + b, i, j]``."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise InvalidArgument(f"pixel_shuffle: channels {c} not divisible by r^2 = {r * r}")
    out_c = c // (r * r)
    y = x.reshape(n, out_c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y).reshape(n, out_c, h * r, w * r)


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle`; also its gradient."""
    _check_nchw(x)
    n, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise InvalidArgument(f"pixel_unshuffle: spatial size {(hr, wr)} not divisible by {r}")
    h, w = hr // r, wr // r
    y = x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y).reshape(n, c * r * r, h, w)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    errors: dict[str, float] = field(default_factory=dict)
    message: str = ""


def finite_difference_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central differences of ``f``.

    ``params`` are perturbed in place (and restored). The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``; ``max_coords`` caps the
    number of randomly chosen coordinates probed per tensor.
    """
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, arr in params.items():
        grad = np.asarray(analytic[name])
        if grad.shape != arr.shape:
            return GradCheckReport(False, math.inf, errors, f"{name}: gradient shape {grad.shape} != {arr.shape}")
        idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            idx = rng.choice(arr.size, size=max_coords, replace=False)
        worst = 0.0
        flat = arr.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return GradCheckReport(False, math.inf, errors, f"{name}[{i}]: objective is not finite")
            num = (fp - fm) / (2 * h)
            ana = float(grad.reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst = max(worst, rel)
        errors[name] = worst
    max_err = max(errors.values(), default=0.0)
    return GradCheckReport(max_err <= tol, max_err, errors)
