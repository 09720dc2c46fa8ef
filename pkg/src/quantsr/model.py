"""Student network: multi-branch training form, fused deploy form, and fusion.

The network is extract -> refine -> upsample, entirely in LR space::

    f0 = stem(x)                      3x3 conv, 3 -> C
    f_i = block_i(f_{i-1})            N re-parameterizable blocks
    f = f_N + f0                      feature-level global skip
    y = pixel_shuffle(head(f), 3)     3x3 conv, C -> 27, then x3 shuffle

A training block sums several conv3x3+BN branches, one conv1x1+BN branch and
an identity BN branch before a ReLU. All branches collapse analytically into
one 3x3 convolution, so the deploy form is a plain conv/ReLU chain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import InvalidArgument, InvalidState
from .tensor import (
    BNParams,
    ConvParams,
    batch_norm,
    batch_norm_grad,
    conv2d,
    conv2d_grad,
    conv2d_with_cols,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    relu_grad,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudentConfig:
    num_blocks: int = 8
    channels: int = 32
    scale: int = 3
    num_conv3_branches: int = 4
    num_conv1_branches: int = 1
    identity_branch: bool = True
    # "interp": stem passes RGB through and the head starts as a x`scale`
    # interpolator; "uniform": plain fan-in uniform everywhere
    init: str = "interp"

    def __post_init__(self):
        if self.num_blocks < 1 or self.channels < 1:
            raise InvalidArgument("num_blocks and channels must be >= 1")
        if self.scale < 1:
            raise InvalidArgument("scale must be >= 1")
        if self.num_conv3_branches < 1:
            raise InvalidArgument("at least one 3x3 branch is required")
        if self.num_conv1_branches != 1:
            raise InvalidArgument("exactly one 1x1 branch is supported")
        if self.init not in ("interp", "uniform"):
            raise InvalidArgument(f"unknown init scheme {self.init!r}")
        if self.init == "interp" and self.channels < 3:
            raise InvalidArgument("interp init needs at least 3 channels")

    @property
    def head_channels(self) -> int:
        return 3 * self.scale**2


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1, (a + 2) * x**3 - (a + 3) * x**2 + 1, np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0)
    )


def interp_head_kernel(scale: int) -> np.ndarray:
    """``(scale, 3)`` weights of a 3-tap bicubic interpolator per sub-pixel phase.

    HR row ``scale*i + a`` sits at LR offset ``(a + 0.5) / scale - 0.5`` from
    row ``i``; the cubic weights of LR rows ``i-1, i, i+1`` are renormalized.
    """
    offsets = (np.arange(scale) + 0.5) / scale - 0.5
    w = _cubic(offsets[:, None] - np.array([-1.0, 0.0, 1.0])[None, :])
    return w / w.sum(axis=1, keepdims=True)


def init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> ConvParams:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias."""
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np.float32)
    b = rng.uniform(-bound, bound, size=c_out).astype(np.float32)
    return ConvParams(w, b)


@dataclass
class TrainBlock:
    """One re-parameterizable block.

    The 3x3 branches are stored stacked along the output-channel axis
    (``conv3.weight`` is ``(B*C, C, 3, 3)``, ``bn3`` has ``B*C`` channels) so a
    single GEMM evaluates all of them; :meth:`branches` exposes per-branch views.
    """

    conv3: ConvParams
    bn3: BNParams
    conv1: ConvParams
    bn1: BNParams
    bn_id: BNParams | None
    num_conv3: int

    @property
    def channels(self) -> int:
        return self.conv1.out_channels

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, num_conv3: int, identity: bool = True):
        c = channels
        convs = [init_conv(rng, c, c, 3) for _ in range(num_conv3)]
        conv3 = ConvParams(
            np.concatenate([p.weight for p in convs]), np.concatenate([p.bias for p in convs])
        )
        return cls(
            conv3=conv3,
            bn3=BNParams.identity(num_conv3 * c),
            conv1=init_conv(rng, c, c, 1),
            bn1=BNParams.identity(c),
            bn_id=BNParams.identity(c) if identity else None,
            num_conv3=num_conv3,
        )

    def branches(self) -> list[tuple[ConvParams, BNParams]]:
        """Per-branch (conv, bn) views of the stacked 3x3 branches (shared memory)."""
        c = self.channels
        out = []
        for i in range(self.num_conv3):
            s = slice(i * c, (i + 1) * c)
            bn = self.bn3
            out.append(
                (
                    ConvParams(self.conv3.weight[s], self.conv3.bias[s]),
                    BNParams(
                        bn.gamma[s], bn.beta[s], bn.running_mean[s], bn.running_var[s], bn.eps, bn.momentum
                    ),
                )
            )
        return out

    def bns(self) -> list[BNParams]:
        return [bn for bn in (self.bn3, self.bn1, self.bn_id) if bn is not None]

    def forward(self, x: np.ndarray, mode: str, cache: dict | None = None) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.channels:
            raise InvalidArgument(f"block expects {self.channels} channels, got input {x.shape}")
        keep = cache is not None
        c3, c1, cid = ({}, {}, {}) if keep else (None, None, None)
        y3, cols3 = conv2d_with_cols(x, self.conv3)
        z = batch_norm(y3, self.bn3, mode, c3).reshape(n, self.num_conv3, c, h, w).sum(axis=1)
        y1, cols1 = conv2d_with_cols(x, self.conv1)
        z += batch_norm(y1, self.bn1, mode, c1)
        if self.bn_id is not None:
            z += batch_norm(x, self.bn_id, mode, cid)
        if keep:
            cache.update(x=x, cols3=cols3, cols1=cols1, bn3=c3, bn1=c1, bn_id=cid, pre=z)
        return relu(z)

    def backward(self, grad_out: np.ndarray, cache: dict, grads: dict, prefix: str) -> np.ndarray:
        x = cache["x"]
        n, c, h, w = x.shape
        g = relu_grad(cache["pre"], grad_out)
        g3 = np.broadcast_to(g[:, None], (n, self.num_conv3, c, h, w)).reshape(n, self.num_conv3 * c, h, w)
        g3, grads[prefix + "bn3.gamma"], grads[prefix + "bn3.beta"] = batch_norm_grad(g3, self.bn3, cache["bn3"])
        gx, grads[prefix + "conv3.weight"], grads[prefix + "conv3.bias"] = conv2d_grad(
            x, self.conv3, g3, cache["cols3"]
        )
        g1, grads[prefix + "bn1.gamma"], grads[prefix + "bn1.beta"] = batch_norm_grad(g, self.bn1, cache["bn1"])
        gx1, grads[prefix + "conv1.weight"], grads[prefix + "conv1.bias"] = conv2d_grad(
            x, self.conv1, g1, cache["cols1"]
        )
        gx += gx1
        if self.bn_id is not None:
            gid, grads[prefix + "bn_id.gamma"], grads[prefix + "bn_id.beta"] = batch_norm_grad(
                g, self.bn_id, cache["bn_id"]
            )
            gx += gid
        return gx

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {
            prefix + "conv3.weight": self.conv3.weight,
            prefix + "conv3.bias": self.conv3.bias,
            prefix + "conv1.weight": self.conv1.weight,
            prefix + "conv1.bias": self.conv1.bias,
        }
        for name, bn in (("bn3", self.bn3), ("bn1", self.bn1), ("bn_id", self.bn_id)):
            if bn is None:
                continue
            out[f"{prefix}{name}.gamma"] = bn.gamma
            out[f"{prefix}{name}.beta"] = bn.beta
            out[f"{prefix}{name}.running_mean"] = bn.running_mean
            out[f"{prefix}{name}.running_var"] = bn.running_var
        return out


_BUFFER_SUFFIXES = (".running_mean", ".running_var")


class TrainModel:
    """Multi-branch student used in stages 1 and 2."""

    def __init__(self, config: StudentConfig, stem: ConvParams, blocks: list[TrainBlock], head: ConvParams):
        self.config = config
        self.stem = stem
        self.blocks = blocks
        self.head = head
        # set by recalibrate_bn, cleared by any train-mode forward
        self.bn_recalibrated = False

    @classmethod
    def init(cls, config: StudentConfig, rng: np.random.Generator | int = 0) -> "TrainModel":
        rng = np.random.default_rng(rng)
        c = config.channels
        stem = init_conv(rng, c, 3, 3)
        blocks = [
            TrainBlock.init(rng, c, config.num_conv3_branches, config.identity_branch)
            for _ in range(config.num_blocks)
        ]
        head = init_conv(rng, config.head_channels, c, 3)
        if config.init == "interp":
            _interp_init(config, stem, blocks[-1], head)
        return cls(config, stem, blocks, head)

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidArgument(f"expected input of shape (N, 3, H, W), got {x.shape}")

    def forward(self, x: np.ndarray, mode: str = "train", cache: dict | None = None) -> np.ndarray:
        """Raw (unclamped) prediction of shape ``(N, 3, s*H, s*W)``."""
        self._check_input(x)
        if mode == "train":
            self.bn_recalibrated = False
        keep = cache is not None
        f0 = conv2d(x, self.stem)
        f = f0
        block_caches = []
        for blk in self.blocks:
            bc = {} if keep else None
            f = blk.forward(f, mode, bc)
            block_caches.append(bc)
        f = f + f0
        z = conv2d(f, self.head)
        if keep:
            cache.update(x=x, skip=f, blocks=block_caches)
        return pixel_shuffle(z, self.config.scale)

    def backward(self, grad_y: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Parameter gradients for a cached :meth:`forward` call."""
        if "blocks" not in cache:
            raise InvalidState("backward called without a forward cache")
        grads: dict[str, np.ndarray] = {}
        gz = pixel_unshuffle(grad_y, self.config.scale)
        gf, grads["head.weight"], grads["head.bias"] = conv2d_grad(cache["skip"], self.head, gz)
        g = gf
        for i in reversed(range(len(self.blocks))):
            g = self.blocks[i].backward(g, cache["blocks"][i], grads, f"blocks.{i}.")
        g0 = g + gf
        _, grads["stem.weight"], grads["stem.bias"] = conv2d_grad(
            cache["x"], self.stem, g0, need_input_grad=False
        )
        return grads

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "stem.weight": self.stem.weight,
            "stem.bias": self.stem.bias,
            "head.weight": self.head.weight,
            "head.bias": self.head.bias,
        }
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_arrays(f"blocks.{i}."))
        return out

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.named_arrays().items() if not k.endswith(_BUFFER_SUFFIXES)}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.named_arrays().items() if k.endswith(_BUFFER_SUFFIXES)}

    def bns(self) -> list[BNParams]:
        return [bn for blk in self.blocks for bn in blk.bns()]


def _interp_init(config: StudentConfig, stem: ConvParams, last: TrainBlock, head: ConvParams) -> None:
    """Start the network as a plain interpolator of its input.

    Stem channels 0-2 copy RGB; the last block's channels 0-2 are held at a
    tiny positive constant (zero BN gain, so they stay trainable through the
    ReLU); the head reads channels 0-2 through a separable 3-tap interpolation
    kernel and starts with zero weight on every other channel.
    """
    r = config.scale
    stem.weight[:3] = 0
    stem.weight[np.arange(3), np.arange(3), 1, 1] = 1
    stem.bias[:3] = 0
    for bn in last.bns():
        chans = np.arange(bn.channels) % last.channels < 3
        bn.gamma[chans] = 0
        bn.beta[chans] = 0
    (last.bn_id or last.bn1).beta[:3] = 1e-3
    taps = interp_head_kernel(r)
    head.weight[:] = 0
    for c in range(3):
        for a in range(r):
            for b in range(r):
                head.weight[c * r * r + a * r + b, c] = np.outer(taps[a], taps[b])
    head.bias[:] = 0


class DeployModel:
    """Fused single-branch network: conv -> [conv, ReLU] x N -> skip -> conv -> shuffle."""

    def __init__(
        self,
        config: StudentConfig,
        stem: ConvParams,
        blocks: list[ConvParams],
        head: ConvParams,
        provenance: dict | None = None,
    ):
        self.config = config
        self.stem = stem
        self.blocks = blocks
        self.head = head
        self.provenance = dict(provenance or {})

    def convs(self) -> list[ConvParams]:
        return [self.stem, *self.blocks, self.head]

    def forward(self, x: np.ndarray, clamp: bool = True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidArgument(f"expected input of shape (N, 3, H, W), got {x.shape}")
        f0 = conv2d(x, self.stem)
        f = f0
        for p in self.blocks:
            f = relu(conv2d(f, p))
        f = f + f0
        y = pixel_shuffle(conv2d(f, self.head), self.config.scale)
        return np.clip(y, 0.0, 1.0) if clamp else y

    def num_parameters(self) -> int:
        return sum(p.weight.size + p.bias.size for p in self.convs())

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {"stem.weight": self.stem.weight, "stem.bias": self.stem.bias}
        for i, p in enumerate(self.blocks):
            out[f"blocks.{i}.weight"] = p.weight
            out[f"blocks.{i}.bias"] = p.bias
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def copy(self) -> "DeployModel":
        return DeployModel(
            self.config, self.stem.copy(), [p.copy() for p in self.blocks], self.head.copy(), self.provenance
        )


# -- fusion -------------------------------------------------------------------


def fuse_conv_bn(weight: np.ndarray, bias: np.ndarray, bn: BNParams) -> tuple[np.ndarray, np.ndarray]:
    """Fold eval-mode BN into the preceding conv: ``W' = t W``, ``b' = beta + t (b - mu)``
    with ``t = gamma / sqrt(var + eps)`` per output channel."""
    if np.any(bn.running_var < 0):
        raise InvalidState("cannot fuse BN with negative running variance")
    if weight.shape[0] != bn.channels:
        raise InvalidArgument(f"conv has {weight.shape[0]} output channels, BN has {bn.channels}")
    t = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = weight.astype(np.float64) * t.reshape(-1, 1, 1, 1)
    b = bn.beta + t * (bias.astype(np.float64) - bn.running_mean)
    return w.astype(weight.dtype), b.astype(bias.dtype)


def _pad_to_3x3(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:2] + (3, 3), dtype=w.dtype)
    out[:, :, 1, 1] = w[:, :, 0, 0]
    return out


def fuse_block(block: TrainBlock) -> ConvParams:
    """Collapse every branch of ``block`` into one equivalent 3x3 convolution."""
    c = block.channels
    if block.conv3.in_channels != c or block.conv3.out_channels != block.num_conv3 * c:
        raise InvalidArgument(
            f"branch channel mismatch: conv3 {block.conv3.weight.shape}, conv1 {block.conv1.weight.shape}"
        )
    w_sum = np.zeros((c, c, 3, 3), dtype=np.float64)
    b_sum = np.zeros(c, dtype=np.float64)
    for conv, bn in block.branches():
        w, b = fuse_conv_bn(conv.weight.astype(np.float64), conv.bias.astype(np.float64), bn)
        w_sum += w
        b_sum += b
    w, b = fuse_conv_bn(block.conv1.weight.astype(np.float64), block.conv1.bias.astype(np.float64), block.bn1)
    w_sum += _pad_to_3x3(w)
    b_sum += b
    if block.bn_id is not None:
        ident = np.zeros((c, c, 3, 3))
        ident[np.arange(c), np.arange(c), 1, 1] = 1.0
        w, b = fuse_conv_bn(ident, np.zeros(c), block.bn_id)
        w_sum += w
        b_sum += b
    dtype = block.conv3.weight.dtype
    return ConvParams(w_sum.astype(dtype), b_sum.astype(dtype))


def fuse_model(model: TrainModel, warn_stale: bool = True) -> DeployModel:
    """Fuse every block; stem and head are copied. The result is terminal.

    Fusing without a prior :func:`recalibrate_bn` is allowed; it is recorded in
    ``provenance["recalibrated"]`` and logged unless ``warn_stale`` is False.
    """
    if isinstance(model, DeployModel):
        raise TypeError("model is already fused; DeployModel cannot be fused again")
    if not isinstance(model, TrainModel):
        raise TypeError(f"expected TrainModel, got {type(model).__name__}")
    if warn_stale and not model.bn_recalibrated:
        logger.warning("fusing with BN statistics that were not recalibrated")
    return DeployModel(
        model.config,
        model.stem.copy(),
        [fuse_block(b) for b in model.blocks],
        model.head.copy(),
        provenance={"recalibrated": bool(model.bn_recalibrated)},
    )


def recalibrate_bn(model: TrainModel, batches: Iterable[np.ndarray], n: int = 64) -> TrainModel:
    """Replace every BN running mean/var with averages over ``n`` forward-only batches."""
    if n < 1:
        raise InvalidArgument(f"recalibration needs n >= 1 batches, got {n}")
    it = iter(batches)
    first = next(it, None)
    if first is None:
        raise InvalidArgument("recalibrate_bn: batch iterator is empty")
    for bn in model.bns():
        bn.reset_running_stats()
    used = 0
    batch = first
    while batch is not None and used < n:
        model.forward(batch, mode="recalibrate")
        used += 1
        if used < n:
            batch = next(it, None)
    if used < n:
        logger.info("recalibrate_bn: iterator exhausted after %d of %d batches", used, n)
    model.bn_recalibrated = True
    return model
