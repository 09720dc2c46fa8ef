"""Versioned binary checkpoints for every model form.

Layout (little-endian)::

    magic     4 bytes  b"QSRC"
    version   u32
    meta_len  u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count     u32
    tensor * count:
        name_len u16, name (UTF-8)
        dtype    u8   (see _DTYPES)
        ndim     u8, ndim x u32 dims
        data     raw little-endian bytes, C order
    crc32     u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidState, ParseError
from .model import DeployModel, StudentConfig, TrainModel
from .quant import QatModel, QuantParams
from .tensor import ConvParams

MAGIC = b"QSRC"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<i4", 4: "<i1", 5: "<u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

KINDS = ("train", "deploy", "qat")


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta["kind"]

    @property
    def stage(self):
        return self.meta.get("stage")

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        out += struct.pack("<II", VERSION, len(meta)) + meta
        out += struct.pack("<I", len(self.tensors))
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            dt = arr.dtype.newbyteorder("<")
            if dt not in _CODES:
                raise TypeError(f"tensor {name}: unsupported dtype {arr.dtype}")
            key = name.encode()
            out += struct.pack("<H", len(key)) + key
            out += struct.pack("<BB", _CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.astype(dt).tobytes()
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16:
        raise ParseError("file too short for a checkpoint", len(data))
    if data[:4] != MAGIC:
        raise ParseError("bad magic, not a QSRC checkpoint", 0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    crc_pos = len(data) - 4
    if zlib.crc32(data[:crc_pos]) != struct.unpack_from("<I", data, crc_pos)[0]:
        raise ParseError("CRC32 mismatch, refusing to load", crc_pos)
    pos = 8
    try:
        (meta_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nl].decode()
            pos += 2 + nl
            code, ndim = struct.unpack_from("<BB", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 2)
            pos += 2 + 4 * ndim
            dt = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > crc_pos:
                raise ParseError(f"tensor {name} runs past the end of the payload", pos)
            tensors[name] = np.frombuffer(data, dt, nbytes // dt.itemsize, pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"malformed checkpoint: {e}", pos) from None
    if pos != crc_pos:
        raise ParseError("unexpected trailing bytes", pos)
    return Checkpoint(meta, tensors)


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# -- model <-> checkpoint -------------------------------------------------------


def _config_from(meta: dict) -> StudentConfig:
    return StudentConfig(**meta["config"])


def _assign(target: dict[str, np.ndarray], source: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, arr in target.items():
        key = prefix + name
        if key not in source:
            raise InvalidState(f"checkpoint is missing tensor {key}")
        if source[key].shape != arr.shape:
            raise InvalidState(f"tensor {key}: checkpoint shape {source[key].shape} != model shape {arr.shape}")
        arr[...] = source[key]


def model_tensors(model) -> dict[str, np.ndarray]:
    if isinstance(model, QatModel):
        out = {f"model.{k}": v for k, v in model.model.named_parameters().items()}
        out.update(_qat_tensors(model))
        return out
    if isinstance(model, TrainModel):
        return {f"model.{k}": v for k, v in model.named_arrays().items()}
    return {f"model.{k}": v for k, v in model.named_parameters().items()}


def model_meta(model) -> dict:
    if isinstance(model, QatModel):
        return {"kind": "qat", "config": asdict(model.model.config), "qat": _qat_meta(model)}
    if isinstance(model, TrainModel):
        return {
            "kind": "train",
            "config": asdict(model.config),
            "bn_recalibrated": bool(model.bn_recalibrated),
            "bn_counts": [bn.num_batches_tracked for bn in model.bns()],
        }
    return {"kind": "deploy", "config": asdict(model.config), "provenance": model.provenance}


def make_checkpoint(model, stage, step: int = 0, **extra) -> Checkpoint:
    meta = model_meta(model)
    meta.update(stage=stage, step=int(step), **extra)
    return Checkpoint(meta, model_tensors(model))


def restore_model(ck: Checkpoint):
    """Rebuild the model stored in ``ck`` (TrainModel, DeployModel or QatModel)."""
    config = _config_from(ck.meta)
    t = ck.tensors
    if ck.kind == "train":
        m = TrainModel.init(config, 0)
        _assign(m.named_arrays(), t, "model.")
        for bn, n in zip(m.bns(), ck.meta.get("bn_counts", [])):
            bn.num_batches_tracked = int(n)
        m.bn_recalibrated = bool(ck.meta.get("bn_recalibrated", False))
        return m
    d = _deploy_from(config, t, ck.meta.get("provenance"))
    if ck.kind == "deploy":
        return d
    if ck.kind == "qat":
        q = QatModel(d)
        _load_qat(q, ck.meta["qat"], t)
        return q
    raise InvalidState(f"unknown checkpoint kind {ck.kind!r}")


def _deploy_from(config: StudentConfig, t: dict, provenance) -> DeployModel:
    def conv(name):
        return ConvParams(t[f"model.{name}.weight"].copy(), t[f"model.{name}.bias"].copy())

    return DeployModel(
        config, conv("stem"), [conv(f"blocks.{i}") for i in range(config.num_blocks)], conv("head"), provenance
    )


def _qat_meta(q: QatModel) -> dict:
    nodes = {}
    for name, node in q.nodes.items():
        nodes[name] = {
            "state": node.observer.state,
            "frozen": node.frozen,
            "zero_point": None if node.qparams is None else node.qparams.zero_point,
            "has_data": node.observer.has_data,
        }
    return {"phase": q.phase, "quant_enabled": q.quant_enabled, "nodes": nodes}


def _qat_tensors(q: QatModel) -> dict[str, np.ndarray]:
    out = {}
    for name, node in q.nodes.items():
        if node.qparams is not None:
            out[f"qat.{name}.scale"] = node.qparams.scale
        if node.observer.has_data:
            out[f"qat.{name}.min"] = node.observer.running_min
            out[f"qat.{name}.max"] = node.observer.running_max
    return out


def _load_qat(q: QatModel, meta: dict, t: dict) -> None:
    q.phase = int(meta["phase"])
    q.quant_enabled = bool(meta["quant_enabled"])
    for name, nm in meta["nodes"].items():
        node = q.nodes[name]
        node.observer.state = nm["state"]
        node.frozen = bool(nm["frozen"])
        if nm["has_data"]:
            node.observer.running_min = t[f"qat.{name}.min"].copy()
            node.observer.running_max = t[f"qat.{name}.max"].copy()
        else:
            node.observer.running_min = node.observer.running_max = None
        if nm["zero_point"] is None:
            node.qparams = None
        else:
            qmin, qmax = node.bounds
            node.qparams = QuantParams(
                t[f"qat.{name}.scale"].copy(), nm["zero_point"], qmin, qmax, node.observer.per_channel
            )


def require_stage(ck: Checkpoint, expected_kind: str, expected_stage, what: str) -> None:
    """Refuse checkpoints from the wrong point in the curriculum."""
    stages = expected_stage if isinstance(expected_stage, tuple) else (expected_stage,)
    if ck.kind != expected_kind or ck.stage not in stages:
        raise InvalidState(
            f"{what} needs a {expected_kind} checkpoint from stage {'/'.join(map(str, stages))}, "
            f"got a {ck.kind} checkpoint from stage {ck.stage}"
        )
