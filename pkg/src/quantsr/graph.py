"""Exported integer graph: construction from a frozen QAT model, a binary
container, and a pure-integer reference engine.

Binary layout (all integers little-endian)::

    magic        4 bytes  b"QSR1"
    version      u32      currently 1
    layer_count  u32
    layer * layer_count:
        op       u8       0 input, 1 conv, 2 add, 3 shuffle
        shape    4 x u32  conv: (C_out, C_in, k, k); add: (src_a, src_b, 0, 0);
                          shuffle: (r, 0, 0, 0); input: (0, 3, 0, 0)
        relu     u8       1 if the conv output is clamped at its zero point
        out_qp   quant params of the layer output
        conv only:
            w_qp     quant params of the weights (per output channel)
            weight   C_out*C_in*k*k int8, row-major (o, i, ky, kx)
            bias     C_out int32
    crc32        u32      zlib CRC32 of every preceding byte

Quant params are encoded as ``u32 n, n x f32 scale, i32 zero_point, u8 flags``
with flag bit 0 = per-channel and bit 1 = signed symmetric int8
(``[-127, 127]``; otherwise ``[0, 255]``).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGraph, InvalidState, ParseError
from .quant import INT8_SYM, UINT8, QatModel, QuantParams, quantize, quantize_bias, requantize_add
from .tensor import im2col, pixel_shuffle

MAGIC = b"QSR1"
VERSION = 1

OP_INPUT, OP_CONV, OP_ADD, OP_SHUFFLE = 0, 1, 2, 3
OP_NAMES = {OP_INPUT: "input", OP_CONV: "conv", OP_ADD: "add", OP_SHUFFLE: "shuffle"}

_FLAG_PER_CHANNEL = 1
_FLAG_SIGNED = 2


@dataclass
class Layer:
    op: int
    shape: tuple[int, int, int, int]
    qparams: QuantParams | None
    relu: bool = False
    weight_qparams: QuantParams | None = None
    weight: np.ndarray | None = None  # int8
    bias: np.ndarray | None = None  # int32

    @property
    def name(self) -> str:
        return OP_NAMES.get(self.op, f"op{self.op}")


@dataclass
class DeployGraph:
    layers: list[Layer]
    version: int = VERSION

    @property
    def input_qparams(self) -> QuantParams:
        return self._need_qp(0)

    @property
    def output_qparams(self) -> QuantParams:
        return self._need_qp(len(self.layers) - 1)

    def _need_qp(self, i: int) -> QuantParams:
        qp = self.layers[i].qparams
        if qp is None:
            raise InvalidGraph(f"layer {i} ({self.layers[i].name}) has no quant params")
        return qp

    def validate(self) -> None:
        if not self.layers or self.layers[0].op != OP_INPUT:
            raise InvalidGraph("graph must start with an input layer")
        for i, layer in enumerate(self.layers):
            if layer.op not in OP_NAMES:
                raise InvalidGraph(f"layer {i}: unknown op tag {layer.op}")
            self._need_qp(i)
            if layer.op == OP_CONV:
                if layer.weight_qparams is None or layer.weight is None or layer.bias is None:
                    raise InvalidGraph(f"layer {i} (conv) is missing weights, bias or weight quant params")
                if layer.weight.shape != layer.shape or layer.bias.shape != (layer.shape[0],):
                    raise InvalidGraph(f"layer {i} (conv): tensors do not match shape {layer.shape}")
            if layer.op == OP_ADD:
                a, b = layer.shape[:2]
                if not (0 <= a < i and 0 <= b < i):
                    raise InvalidGraph(f"layer {i} (add) references layers {a}, {b} that are not earlier")

    def to_bytes(self) -> bytes:
        self.validate()
        out = bytearray(MAGIC)
        out += struct.pack("<II", self.version, len(self.layers))
        for layer in self.layers:
            out += struct.pack("<B4IB", layer.op, *layer.shape, int(layer.relu))
            out += _pack_qp(layer.qparams)
            if layer.op == OP_CONV:
                out += _pack_qp(layer.weight_qparams)
                out += layer.weight.astype("<i1").tobytes()
                out += layer.bias.astype("<i4").tobytes()
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeployGraph":
        return import_graph(data)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DeployGraph":
        with open(path, "rb") as f:
            return import_graph(f.read())

    @property
    def scale(self) -> int:
        for layer in self.layers:
            if layer.op == OP_SHUFFLE:
                return layer.shape[0]
        return 1


def _pack_qp(qp: QuantParams) -> bytes:
    flags = (_FLAG_PER_CHANNEL if qp.per_channel else 0) | (_FLAG_SIGNED if qp.qmin < 0 else 0)
    return (
        struct.pack("<I", qp.scale.size)
        + qp.scale.astype("<f4").tobytes()
        + struct.pack("<iB", qp.zero_point, flags)
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated input while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def qparams(self, what: str) -> QuantParams:
        start = self.pos
        (n,) = self.unpack("<I", f"{what} scale count")
        if n == 0 or n > 1 << 20:
            raise ParseError(f"implausible scale count {n} in {what}", start)
        scale = np.frombuffer(self.take(4 * n, f"{what} scales"), dtype="<f4").astype(np.float32)
        zp, flags = self.unpack("<iB", f"{what} zero point")
        bounds = INT8_SYM if flags & _FLAG_SIGNED else UINT8
        try:
            return QuantParams(scale, zp, *bounds, per_channel=bool(flags & _FLAG_PER_CHANNEL))
        except ValueError as e:
            raise ParseError(f"invalid {what}: {e}", start) from None


def import_graph(data: bytes) -> DeployGraph:
    """Parse a serialized graph; any defect raises :class:`ParseError` with its byte offset."""
    r = _Reader(bytes(data))
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic, not a QSR1 deploy graph", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ParseError(f"unsupported graph version {version} (expected {VERSION})", 4)
    if len(data) < 16:
        raise ParseError("truncated input while reading layer count", len(data))
    crc_pos = len(data) - 4
    (stored,) = struct.unpack("<I", data[crc_pos:])
    if zlib.crc32(data[:crc_pos]) != stored:
        raise ParseError("CRC32 mismatch", crc_pos)
    r.data = r.data[:crc_pos]
    (count,) = r.unpack("<I", "layer count")
    layers = []
    for i in range(count):
        start = r.pos
        op, *shape, relu = r.unpack("<B4IB", f"layer {i} header")
        if op not in OP_NAMES:
            raise ParseError(f"layer {i}: unknown op tag {op}", start)
        qp = r.qparams(f"layer {i} output params")
        layer = Layer(op, tuple(shape), qp, bool(relu))
        if op == OP_CONV:
            layer.weight_qparams = r.qparams(f"layer {i} weight params")
            n_w = int(np.prod(shape))
            layer.weight = np.frombuffer(r.take(n_w, f"layer {i} weights"), dtype="<i1").reshape(shape).astype(np.int8)
            layer.bias = np.frombuffer(r.take(4 * shape[0], f"layer {i} bias"), dtype="<i4").astype(np.int32)
        layers.append(layer)
    if r.pos != crc_pos:
        raise ParseError(f"{crc_pos - r.pos} unexpected trailing bytes", r.pos)
    g = DeployGraph(layers, version)
    try:
        g.validate()
    except InvalidGraph as e:
        raise ParseError(str(e), 0) from None
    return g


def export_graph(q: QatModel) -> DeployGraph:
    """Materialize a phase-3 QAT model as integer weights and frozen quant params."""
    if q.phase != 3:
        raise InvalidState(f"export needs a QAT model in phase 3 (frozen), it is in phase {q.phase}")
    n = q.nodes
    layers = [Layer(OP_INPUT, (0, 3, 0, 0), n["input"].require().copy())]
    prev = n["input"].require()
    names = q.layer_names()
    for name in names:
        p = q.conv(name)
        if name == "head":
            last = len(layers) - 1
            layers.append(Layer(OP_ADD, (last, 1, 0, 0), n["skip.out"].require().copy()))
            prev = n["skip.out"].require()
        w_qp = n[f"{name}.weight"].require()
        wq, _ = quantize(p.weight, w_qp)
        bq, _ = quantize_bias(p.bias, float(prev.scale[0]), w_qp)
        out_qp = n[f"{name}.out"].require()
        layers.append(
            Layer(
                OP_CONV,
                tuple(p.weight.shape),
                out_qp.copy(),
                relu=name.startswith("blocks."),
                weight_qparams=w_qp.copy(),
                weight=wq.astype(np.int8),
                bias=bq.astype(np.int32),
            )
        )
        prev = out_qp
    r = q.model.config.scale
    layers.append(Layer(OP_SHUFFLE, (r, 0, 0, 0), prev.copy()))
    g = DeployGraph(layers)
    g.validate()
    return g


# -- integer engine -------------------------------------------------------------


def quantize_input(g: DeployGraph, x: np.ndarray) -> np.ndarray:
    """Float ``[0, 1]`` NCHW input -> uint8 codes on the graph's input grid."""
    return quantize(x, g.input_qparams)[0].astype(np.uint8)


def dequantize_output(g: DeployGraph, y: np.ndarray) -> np.ndarray:
    qp = g.output_qparams
    return ((y.astype(np.float64) - qp.zero_point) * np.float64(qp.scale[0])).astype(np.float32)


def requant_multiplier(s_in: float, w_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    """Per-channel float64 multiplier ``s_in * s_w / s_out``."""
    return np.float64(s_in) * w_qp.scale.astype(np.float64) / np.float64(out_qp.scale[0])


def conv_accumulate(x_q: np.ndarray, zp_in: int, layer: Layer) -> np.ndarray:
    """Exact int32-domain accumulator ``sum w * (x - zp) + bias`` as int64.

    The products are summed by a float64 GEMM; every partial sum is an integer
    far below 2**53, so the result is exact."""
    k = layer.shape[2]
    n, _, h, w = x_q.shape
    cols = im2col(x_q.astype(np.float64) - zp_in, k)
    acc = layer.weight.reshape(layer.shape[0], -1).astype(np.float64) @ cols
    acc = acc.reshape(layer.shape[0], n, h, w).transpose(1, 0, 2, 3).astype(np.int64)
    return acc + layer.bias.astype(np.int64).reshape(1, -1, 1, 1)


def requantize(acc: np.ndarray, multiplier: np.ndarray, out_qp: QuantParams, relu: bool) -> np.ndarray:
    y = np.rint(acc * multiplier.reshape(1, -1, 1, 1)).astype(np.int64) + out_qp.zero_point
    lo = out_qp.zero_point if relu else out_qp.qmin
    return np.clip(y, lo, out_qp.qmax)


def integer_infer(g: DeployGraph, x_uint8: np.ndarray) -> np.ndarray:
    """Run the graph on uint8 input codes; returns uint8 output codes."""
    g.validate()
    if x_uint8.ndim != 4 or x_uint8.shape[1] != 3:
        raise InvalidGraph(f"expected uint8 input of shape (N, 3, H, W), got {x_uint8.shape}")
    vals: list[np.ndarray] = []
    cur = x_uint8.astype(np.int64)
    cur_qp = g.layers[0].qparams
    for i, layer in enumerate(g.layers):
        if layer.op == OP_INPUT:
            cur = np.clip(cur, cur_qp.qmin, cur_qp.qmax)
        elif layer.op == OP_CONV:
            if cur.shape[1] != layer.shape[1]:
                raise InvalidGraph(f"layer {i}: conv expects {layer.shape[1]} channels, got {cur.shape[1]}")
            acc = conv_accumulate(cur, cur_qp.zero_point, layer)
            m = requant_multiplier(float(cur_qp.scale[0]), layer.weight_qparams, layer.qparams)
            cur = requantize(acc, m, layer.qparams, layer.relu)
        elif layer.op == OP_ADD:
            a, b = layer.shape[:2]
            cur = requantize_add(vals[a], g.layers[a].qparams, vals[b], g.layers[b].qparams, layer.qparams)
        elif layer.op == OP_SHUFFLE:
            cur = pixel_shuffle(cur, layer.shape[0])
        cur_qp = layer.qparams
        vals.append(cur)
    return cur.astype(np.uint8)


def infer_float(g: DeployGraph, x: np.ndarray) -> np.ndarray:
    """Float in, float out convenience wrapper around :func:`integer_infer`."""
    return dequantize_output(g, integer_infer(g, quantize_input(g, x)))
