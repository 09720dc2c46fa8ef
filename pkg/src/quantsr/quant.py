"""Affine quantization, observers, fake quantization and the QAT graph.

Conventions: weights are int8 symmetric per output channel in ``[-127, 127]``;
activations are uint8 affine per tensor in ``[0, 255]``; biases are int32 with
scale ``s_in * s_w``. Rounding is half-to-even everywhere.

Once quantization is enabled the QAT forward runs in float64 on dequantized
values, so its rounding decisions match the integer engine in ``graph.py``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidState
from .model import DeployModel
from .tensor import ConvParams, conv2d, conv2d_grad, conv2d_with_cols, pixel_shuffle, pixel_unshuffle, relu, relu_grad

UINT8 = (0, 255)
INT8_SYM = (-127, 127)
INT32 = (-(2**31), 2**31 - 1)


@dataclass
class QuantParams:
    scale: np.ndarray  # float32, shape (1,) per tensor or (C,) per output channel
    zero_point: int
    qmin: int
    qmax: int
    per_channel: bool = False

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float32).reshape(-1)
        self.zero_point = int(self.zero_point)
        if not np.all(self.scale > 0):
            raise InvalidArgument(f"quantization scale must be positive, got {self.scale}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise InvalidArgument(f"zero point {self.zero_point} outside [{self.qmin}, {self.qmax}]")
        if not self.per_channel and self.scale.size != 1:
            raise InvalidArgument("per-tensor params must have exactly one scale")

    @property
    def symmetric(self) -> bool:
        return self.qmin == -self.qmax and self.zero_point == 0

    def scale_for(self, x: np.ndarray) -> np.ndarray:
        """Scale broadcastable against ``x`` (channel axis 0 when per-channel)."""
        if self.per_channel:
            return self.scale.astype(np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
        return np.float64(self.scale[0])

    def copy(self) -> "QuantParams":
        return QuantParams(self.scale.copy(), self.zero_point, self.qmin, self.qmax, self.per_channel)

    def same_as(self, other: "QuantParams | None") -> bool:
        return (
            other is not None
            and self.scale.tobytes() == other.scale.tobytes()
            and (self.zero_point, self.qmin, self.qmax, self.per_channel)
            == (other.zero_point, other.qmin, other.qmax, other.per_channel)
        )


def compute_qparams(
    min_val,
    max_val,
    bounds: tuple[int, int] = UINT8,
    symmetric: bool = False,
) -> QuantParams:
    """Scale and zero point for the range ``[min_val, max_val]`` widened to include 0.

    Array-valued ranges give per-channel params (symmetric only).
    """
    mn = np.minimum(np.asarray(min_val, dtype=np.float64), 0.0)
    mx = np.maximum(np.asarray(max_val, dtype=np.float64), 0.0)
    if np.any(np.asarray(min_val) > np.asarray(max_val)):
        raise InvalidArgument(f"compute_qparams: min {min_val} > max {max_val}")
    qmin, qmax = bounds
    per_channel = mn.ndim > 0
    if symmetric:
        scale = np.maximum(np.abs(mn), np.abs(mx)) / qmax
        scale = np.where(scale > 0, scale, 1.0)
        return QuantParams(scale, 0, qmin, qmax, per_channel)
    if per_channel:
        raise InvalidArgument("per-channel quantization is only supported for symmetric ranges")
    scale = float((mx - mn) / (qmax - qmin))
    if scale == 0.0:
        return QuantParams(1.0, 0, qmin, qmax)
    zp = int(np.clip(round(qmin - float(mn) / scale), qmin, qmax))
    return QuantParams(scale, zp, qmin, qmax)


def quantize(x: np.ndarray, qp: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes (as int64) and the mask of values that were not clipped."""
    q = np.rint(x.astype(np.float64) / qp.scale_for(x)) + qp.zero_point
    inside = (q >= qp.qmin) & (q <= qp.qmax)
    return np.clip(q, qp.qmin, qp.qmax).astype(np.int64), inside


def dequantize(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return (q.astype(np.float64) - qp.zero_point) * qp.scale_for(q)


def fake_quant_with_mask(x: np.ndarray, qp: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    q, inside = quantize(x, qp)
    return dequantize(q, qp).astype(x.dtype), inside


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """``dequantize(quantize(x))`` in the dtype of ``x``."""
    return fake_quant_with_mask(x, qp)[0]


def fake_quant_grad(x: np.ndarray, qp: QuantParams, grad_out: np.ndarray) -> np.ndarray:
    """Straight-through estimator: pass ``grad_out`` where ``x`` was not clipped."""
    return grad_out * quantize(x, qp)[1]


def quantize_bias(bias: np.ndarray, s_in: float, w_qp: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """int32 bias codes and the float64 per-channel bias scale ``s_in * s_w``."""
    bscale = np.float64(s_in) * w_qp.scale.astype(np.float64)
    q = np.clip(np.rint(bias.astype(np.float64) / bscale), *INT32).astype(np.int64)
    return q, bscale


# -- observers -------------------------------------------------------------------

OBSERVER_STATES = ("active", "disabled", "frozen")


@dataclass
class Observer:
    mode: str = "minmax"  # or "ema"
    decay: float = 0.99
    per_channel: bool = False
    state: str = "active"
    running_min: np.ndarray | None = None
    running_max: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("minmax", "ema"):
            raise InvalidArgument(f"unknown observer mode {self.mode!r}")
        if self.state not in OBSERVER_STATES:
            raise InvalidArgument(f"unknown observer state {self.state!r}")

    @property
    def has_data(self) -> bool:
        return self.running_min is not None

    def observe(self, x: np.ndarray) -> "Observer":
        """Fold the extrema of ``x`` into the running range (no-op unless active)."""
        if self.state != "active":
            return self
        if self.per_channel:
            flat = x.reshape(x.shape[0], -1)
            bmin, bmax = flat.min(axis=1).astype(np.float64), flat.max(axis=1).astype(np.float64)
        else:
            bmin, bmax = np.array([x.min()], np.float64), np.array([x.max()], np.float64)
        if not self.has_data:
            self.running_min, self.running_max = bmin, bmax
        elif self.mode == "minmax":
            self.running_min = np.minimum(self.running_min, bmin)
            self.running_max = np.maximum(self.running_max, bmax)
        else:
            d = self.decay
            self.running_min = d * self.running_min + (1 - d) * bmin
            self.running_max = d * self.running_max + (1 - d) * bmax
        return self


def observe(o: Observer, x: np.ndarray) -> Observer:
    return o.observe(x)


@dataclass
class FakeQuantNode:
    name: str
    kind: str  # input | act | weight | skip
    observer: Observer
    bounds: tuple[int, int]
    symmetric: bool
    qparams: QuantParams | None = None
    frozen: bool = False

    def refresh(self) -> None:
        """Recompute quant params from the observer while it is active."""
        if self.observer.state != "active" or not self.observer.has_data:
            return
        mn, mx = self.observer.running_min, self.observer.running_max
        if not self.observer.per_channel:
            mn, mx = float(mn[0]), float(mx[0])
        self.qparams = compute_qparams(mn, mx, self.bounds, self.symmetric)

    def require(self) -> QuantParams:
        if self.qparams is None:
            raise InvalidState(f"fake-quant node {self.name} has no quant params; calibrate first")
        return self.qparams


def _act_node(name: str, kind: str = "act") -> FakeQuantNode:
    return FakeQuantNode(name, kind, Observer(mode="ema", decay=0.99), UINT8, False)


def _weight_node(name: str) -> FakeQuantNode:
    return FakeQuantNode(name, "weight", Observer(mode="minmax", per_channel=True), INT8_SYM, True)


# -- QAT model --------------------------------------------------------------------


class QatModel:
    """A fused :class:`DeployModel` with fake-quant nodes on its input, every
    conv weight, every conv output and the global skip-add output."""

    def __init__(self, model: DeployModel):
        self.model = model
        self.phase = 1
        self.quant_enabled = True
        self.observing = True
        nodes = {"input": _act_node("input", "input")}
        # inputs live in [0, 1]; seed the input range so its grid is 1/255
        nodes["input"].observer = Observer(
            mode="minmax", running_min=np.zeros(1), running_max=np.ones(1)
        )
        for name in self.layer_names():
            nodes[f"{name}.weight"] = _weight_node(f"{name}.weight")
            nodes[f"{name}.out"] = _act_node(f"{name}.out")
        nodes["skip.out"] = _act_node("skip.out", "skip")
        self.nodes: dict[str, FakeQuantNode] = nodes
        self.nodes["input"].refresh()

    def layer_names(self) -> list[str]:
        return ["stem", *(f"blocks.{i}" for i in range(len(self.model.blocks))), "head"]

    def conv(self, name: str) -> ConvParams:
        if name == "stem":
            return self.model.stem
        if name == "head":
            return self.model.head
        return self.model.blocks[int(name.split(".")[1])]

    def named_parameters(self) -> dict[str, np.ndarray]:
        return self.model.named_parameters()

    # phases ------------------------------------------------------------------

    def set_phase(self, phase: int) -> None:
        if phase not in (1, 2, 3):
            raise InvalidArgument(f"QAT phase must be 1, 2 or 3, got {phase}")
        if phase < self.phase:
            raise InvalidState(f"cannot move from QAT phase {self.phase} back to {phase}")
        state = {1: "active", 2: "disabled", 3: "frozen"}[phase]
        for node in self.nodes.values():
            node.observer.state = state
            node.frozen = phase == 3
        self.phase = phase

    def qparams_snapshot(self) -> dict[str, bytes]:
        out = {}
        for name, node in self.nodes.items():
            qp = node.qparams
            out[name] = b"" if qp is None else qp.scale.tobytes() + np.int64(qp.zero_point).tobytes()
        return out

    def state_snapshot(self) -> dict[str, tuple]:
        """Everything about the fake-quant nodes that training could change."""
        qps = self.qparams_snapshot()
        out = {}
        for name, node in self.nodes.items():
            o = node.observer
            out[name] = (
                qps[name],
                o.state,
                None if o.running_min is None else o.running_min.tobytes() + o.running_max.tobytes(),
                node.frozen,
                self.quant_enabled,
            )
        return out

    # forward / backward --------------------------------------------------------

    @contextlib.contextmanager
    def no_observe(self):
        """Evaluate without touching observer statistics."""
        prev, self.observing = self.observing, False
        try:
            yield self
        finally:
            self.observing = prev

    def _observe(self, name: str, x: np.ndarray) -> QuantParams | None:
        node = self.nodes[name]
        if self.observing and node.observer.state == "active":
            node.observer.observe(x)
            node.refresh()
        return node.qparams

    def calibrate(self, batches, n: int | None = None) -> None:
        """Run forward-only passes with quantization disabled to seed every observer."""
        prev = self.quant_enabled
        self.quant_enabled = False
        try:
            for i, x in enumerate(batches):
                if n is not None and i >= n:
                    break
                self.forward(x)
        finally:
            self.quant_enabled = prev

    def forward(self, x: np.ndarray, cache: dict | None = None, clamp: bool = False) -> np.ndarray:
        """Fake-quantized forward. With ``quant_enabled`` False this is exactly
        the float32 deploy forward (observers still watch activations)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidArgument(f"expected input of shape (N, 3, H, W), got {x.shape}")
        if not self.quant_enabled:
            y = self._forward_float(x)
        else:
            y = self._forward_quant(x, cache)
        return np.clip(y, 0.0, 1.0) if clamp else y

    def _forward_float(self, x: np.ndarray) -> np.ndarray:
        m = self.model
        self._observe("input", x)
        for name in self.layer_names():
            self._observe(f"{name}.weight", self.conv(name).weight)
        f0 = conv2d(x, m.stem)
        self._observe("stem.out", f0)
        f = f0
        for i, p in enumerate(m.blocks):
            f = relu(conv2d(f, p))
            self._observe(f"blocks.{i}.out", f)
        f = f + f0
        self._observe("skip.out", f)
        z = conv2d(f, m.head)
        self._observe("head.out", z)
        return pixel_shuffle(z, m.config.scale)

    def _qconv(self, name: str, x: np.ndarray, s_in: float, use_relu: bool, cache: dict | None):
        p = self.conv(name)
        self._observe(f"{name}.weight", p.weight)
        w_qp = self.nodes[f"{name}.weight"].require()
        wq, w_mask = fake_quant_with_mask(p.weight.astype(np.float64), w_qp)
        bq, bscale = quantize_bias(p.bias, s_in, w_qp)
        qconv = ConvParams(wq, bq * bscale)
        y, cols = conv2d_with_cols(x, qconv)
        pre = y
        if use_relu:
            y = relu(y)
        self._observe(f"{name}.out", y)
        out_qp = self.nodes[f"{name}.out"].require()
        a, a_mask = fake_quant_with_mask(y, out_qp)
        if cache is not None:
            cache[name] = dict(x=x, cols=cols, conv=qconv, w_mask=w_mask, pre=pre, relu=use_relu, a_mask=a_mask)
        return a

    def _forward_quant(self, x: np.ndarray, cache: dict | None) -> np.ndarray:
        m = self.model
        x = x.astype(np.float64)
        self._observe("input", x)
        in_qp = self.nodes["input"].require()
        xq, _ = fake_quant_with_mask(x, in_qp)
        s_prev = float(in_qp.scale[0])
        f0 = self._qconv("stem", xq, s_prev, False, cache)
        f = f0
        s_prev = float(self.nodes["stem.out"].qparams.scale[0])
        for i in range(len(m.blocks)):
            name = f"blocks.{i}"
            f = self._qconv(name, f, s_prev, True, cache)
            s_prev = float(self.nodes[f"{name}.out"].qparams.scale[0])
        last = f"blocks.{len(m.blocks) - 1}.out"
        s = self._skip_add(f, f0, self.nodes[last].qparams, self.nodes["stem.out"].qparams, cache)
        z = self._qconv("head", s, float(self.nodes["skip.out"].qparams.scale[0]), False, cache)
        return pixel_shuffle(z, m.config.scale).astype(np.float32)

    def _skip_add(self, a, b, a_qp: QuantParams, b_qp: QuantParams, cache: dict | None):
        """Quantized ``a + b``: each addend is requantized onto the output grid
        and the codes are added, exactly as the integer engine does."""
        self._observe("skip.out", a + b)
        out_qp = self.nodes["skip.out"].require()
        total = requantize_add(quantize(a, a_qp)[0], a_qp, quantize(b, b_qp)[0], b_qp, out_qp, clip=False)
        inside = (total >= out_qp.qmin) & (total <= out_qp.qmax)
        out = dequantize(np.clip(total, out_qp.qmin, out_qp.qmax), out_qp)
        if cache is not None:
            cache["skip"] = dict(mask=inside)
        return out

    def backward(self, grad_y: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Straight-through gradients for a cached quantized :meth:`forward`."""
        if "head" not in cache:
            raise InvalidState("backward needs the cache of a quantization-enabled forward")
        m = self.model
        grads: dict[str, np.ndarray] = {}
        g = pixel_unshuffle(grad_y.astype(np.float64), m.config.scale)
        g = self._qconv_backward("head", g, cache, grads)
        g = g * cache["skip"]["mask"]
        g_skip = g
        for i in reversed(range(len(m.blocks))):
            g = self._qconv_backward(f"blocks.{i}", g, cache, grads)
        self._qconv_backward("stem", g + g_skip, cache, grads, need_input_grad=False)
        return grads

    def _qconv_backward(self, name, g, cache, grads, need_input_grad=True):
        c = cache[name]
        g = g * c["a_mask"]
        if c["relu"]:
            g = relu_grad(c["pre"], g)
        gx, gw, gb = conv2d_grad(c["x"], c["conv"], g, c["cols"], need_input_grad)
        p = self.conv(name)
        grads[f"{name}.weight"] = (gw * c["w_mask"]).astype(p.weight.dtype)
        grads[f"{name}.bias"] = gb.astype(p.bias.dtype)
        return gx


def requantize_add(a_q, a_qp: QuantParams, b_q, b_qp: QuantParams, out_qp: QuantParams, clip: bool = True):
    """Integer skip-add: rescale both addends to the output grid, then add codes."""
    s_out = np.float64(out_qp.scale[0])
    ra = np.rint((a_q - a_qp.zero_point) * (np.float64(a_qp.scale[0]) / s_out)).astype(np.int64)
    rb = np.rint((b_q - b_qp.zero_point) * (np.float64(b_qp.scale[0]) / s_out)).astype(np.int64)
    total = ra + rb + out_qp.zero_point
    return np.clip(total, out_qp.qmin, out_qp.qmax) if clip else total


def equalize_skip_ranges(model: DeployModel, batches, n: int = 8, max_ratio: float = 100.0) -> DeployModel:
    """Rescale the channels of the global-skip feature space so every channel
    spans the same activation range.

    Channel ``c`` of the stem and of the last block is multiplied by ``s_c`` and
    the matching input columns of the first block and of the head are divided
    by it. ReLU commutes with positive scaling, so the network function is
    unchanged; what changes is how well a single per-tensor activation scale
    and per-row weight scales fit every channel. ``s_c`` maps the observed
    range of channel ``c`` onto the geometric mean of all channel ranges.
    """
    out = model.copy()
    peak = np.zeros(model.config.channels)
    seen = 0
    for i, x in enumerate(batches):
        if i >= n:
            break
        f0 = conv2d(x, out.stem)
        f = f0
        for p in out.blocks:
            f = relu(conv2d(f, p))
        peak = np.maximum(peak, np.abs(f + f0).max(axis=(0, 2, 3)))
        seen += 1
    if seen == 0:
        raise InvalidArgument("equalize_skip_ranges: batch iterator is empty")
    live = peak > 0
    if not live.any():
        return out
    ref = np.exp(np.log(peak[live]).mean())
    s = np.ones_like(peak)
    s[live] = np.clip(ref / peak[live], 1.0 / max_ratio, max_ratio)
    s = s.astype(np.float32)
    rows, cols = s[:, None, None, None], s[None, :, None, None]
    for p in (out.stem, out.blocks[-1]):
        p.weight *= rows
        p.bias *= s
    for p in (out.blocks[0], out.head):
        p.weight /= cols
    out.provenance["skip_equalized"] = True
    return out


def insert_qat(model: DeployModel) -> QatModel:
    """Wrap a fused model with fake-quant nodes (observers fresh, phase 1)."""
    if not isinstance(model, DeployModel):
        raise InvalidState("QAT must be applied to a fused DeployModel; fuse the training model first")
    return QatModel(model.copy())


def phase_for_step(step: int, boundaries: tuple[int, int]) -> int:
    t1, t2 = boundaries
    if t1 > t2:
        raise InvalidArgument(f"QAT boundaries must satisfy t1 <= t2, got {boundaries}")
    return 1 if step < t1 else 2 if step < t2 else 3


def set_phase(q: QatModel, step: int, boundaries: tuple[int, int]) -> QatModel:
    """Move ``q`` into the curriculum phase for ``step``: observe, then freeze the
    grid at ``t1``, then freeze all fake-quant state at ``t2``."""
    phase = phase_for_step(step, boundaries)
    if phase != q.phase:
        q.set_phase(phase)
    return q


def default_boundaries(iterations: int) -> tuple[int, int]:
    """Phase boundaries at 30/150 and 90/150 of the stage length."""
    return int(math.floor(iterations * 30 / 150)), int(math.floor(iterations * 90 / 150))
