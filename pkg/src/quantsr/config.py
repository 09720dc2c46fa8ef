"""Plain-text ``key = value`` run configuration.

Every key has a default (see :data:`SCHEMA`); unknown keys are errors. Lines
starting with ``#`` are comments. ``none`` is the null value for optional keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import InvalidArgument
from .model import StudentConfig
from .train import StageConfig


@dataclass(frozen=True)
class Key:
    kind: type
    default: Any
    doc: str
    optional: bool = False


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "master seed for data order, init and sampling"),
    "data.kind": Key(str, "band-limited-noise", "synthetic generator (or 'mixed')"),
    "data.n": Key(int, 16, "number of synthetic image pairs"),
    "data.size": Key(int, 96, "HR side length in pixels (multiple of 3)"),
    "data.val_count": Key(int, 4, "last N images held out for validation"),
    "data.teacher_missing": Key(str, "error", "missing teacher PNG: 'error' or 'skip'"),
    "model.num_blocks": Key(int, 8, "re-parameterizable blocks"),
    "model.channels": Key(int, 32, "feature channels"),
    "model.num_conv3_branches": Key(int, 4, "3x3 conv+BN branches per block"),
    "model.init": Key(str, "interp", "'interp' (starts as an interpolator) or 'uniform'"),
    "teacher.num_blocks": Key(int, 8, "proxy teacher depth"),
    "teacher.channels": Key(int, 64, "proxy teacher width"),
    "teacher.num_conv3_branches": Key(int, 1, "proxy teacher 3x3 branches"),
    "teacher.iterations": Key(int, 200, "proxy teacher training steps"),
    "teacher.lr0": Key(float, 1e-3, "proxy teacher peak learning rate"),
    "teacher.patch": Key(int, 24, "proxy teacher LR patch size"),
    "teacher.batch": Key(int, 8, "proxy teacher batch size"),
    "stage1.iterations": Key(int, 300, "stage-1 steps"),
    "stage1.lr0": Key(float, 1e-3, "stage-1 peak learning rate"),
    "stage1.lr_min": Key(float, None, "final learning rate (none: lr0/100)", True),
    "stage1.patch": Key(int, 128, "LR patch size (clamped to the images)"),
    "stage1.batch": Key(int, 8, "batch size"),
    "stage1.warmup_steps": Key(int, None, "linear warmup steps (none: 5% of iterations)", True),
    "stage1.val_every": Key(int, 50, "validate every N steps"),
    "stage2.iterations": Key(int, 100, "stage-2 steps"),
    "stage2.lr0": Key(float, 3e-5, "stage-2 peak learning rate"),
    "stage2.lr_min": Key(float, None, "final learning rate (none: lr0/100)", True),
    "stage2.patch": Key(int, 160, "LR patch size (clamped to the images)"),
    "stage2.batch": Key(int, 8, "batch size"),
    "stage2.grad_clip_norm": Key(float, 1.0, "global gradient-norm clip", True),
    "stage2.ema_decay": Key(float, 0.999, "EMA decay of the weights", True),
    "stage2.select_ema": Key(bool, True, "validate and hand over EMA weights instead of raw ones"),
    "stage2.weight_clip_lo": Key(float, -1.5, "lower conv-weight bound"),
    "stage2.weight_clip_hi": Key(float, 1.5, "upper conv-weight bound"),
    "stage2.val_every": Key(int, 50, "validate every N steps"),
    "stage3.iterations": Key(int, 75, "stage-3 (QAT) steps"),
    "stage3.lr0": Key(float, 1e-6, "stage-3 peak learning rate"),
    "stage3.lr_min": Key(float, None, "final learning rate (none: lr0/100)", True),
    "stage3.patch": Key(int, 144, "LR patch size (clamped to the images)"),
    "stage3.batch": Key(int, 1, "batch size"),
    "stage3.weight_clip_lo": Key(float, -1.5, "lower conv-weight bound (widened to the fused range)"),
    "stage3.weight_clip_hi": Key(float, 1.5, "upper conv-weight bound (widened to the fused range)"),
    "stage3.observer_off": Key(float, 0.2, "fraction of stage 3 after which observers stop"),
    "stage3.freeze": Key(float, 0.6, "fraction of stage 3 after which fake-quant state freezes"),
    "stage3.kd_end": Key(float, 0.01, "distillation weight reached at the end of stage 3"),
    "stage3.equalize": Key(bool, True, "equalize skip-space channel ranges before QAT"),
    "stage3.calib_batches": Key(int, 8, "observer warm-up batches before QAT"),
    "stage3.val_every": Key(int, 25, "validate every N steps"),
    "train.ckpt_every": Key(int, 50, "write a resumable checkpoint every N steps (0: never)"),
    "recal.batches": Key(int, 64, "forward-only BN recalibration batches"),
    "recal.batch": Key(int, 8, "BN recalibration batch size"),
    "infer.max_output_pixels": Key(int, 16_777_216, "refuse inference whose output exceeds this many pixels"),
}


def _format(key: str, v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, raw: str):
    entry = SCHEMA[key]
    raw = raw.strip()
    if raw.lower() == "none":
        if not entry.optional:
            raise InvalidArgument(f"config key {key} may not be none")
        return None
    try:
        if entry.kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if entry.kind is int:
            return int(raw)
        if entry.kind is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError:
        raise InvalidArgument(f"config key {key}: cannot parse {raw!r} as {entry.kind.__name__}") from None


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: s.default for k, s in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise InvalidArgument(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgument(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise InvalidArgument(f"{source}:{lineno}: unknown config key {key!r}")
            cfg.values[key] = _parse(key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def serialize(self, with_docs: bool = False) -> str:
        lines = []
        for key, entry in SCHEMA.items():
            if with_docs:
                lines.append(f"# {entry.doc}")
            lines.append(f"{key} = {_format(key, self.values[key])}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize())

    # -- typed views ------------------------------------------------------------

    def student(self) -> StudentConfig:
        return StudentConfig(
            num_blocks=self["model.num_blocks"],
            channels=self["model.channels"],
            num_conv3_branches=self["model.num_conv3_branches"],
            init=self["model.init"],
        )

    def teacher(self) -> StudentConfig:
        return StudentConfig(
            num_blocks=self["teacher.num_blocks"],
            channels=self["teacher.channels"],
            num_conv3_branches=self["teacher.num_conv3_branches"],
            init=self["model.init"],
        )

    def teacher_stage(self) -> StageConfig:
        it = self["teacher.iterations"]
        return StageConfig(
            stage=1,
            iterations=it,
            lr0=self["teacher.lr0"],
            patch=self["teacher.patch"],
            batch=self["teacher.batch"],
            warmup_steps=max(1, it // 20) if it > 1 else 0,
            val_every=it,
            seed=self["seed"] + 1000,
        )

    def stage(self, n: int) -> StageConfig:
        p = f"stage{n}."
        it = self[p + "iterations"]
        common = dict(
            stage=n,
            iterations=it,
            lr0=self[p + "lr0"],
            lr_min=self[p + "lr_min"],
            patch=self[p + "patch"],
            batch=self[p + "batch"],
            val_every=self[p + "val_every"],
            seed=self["seed"],
            recal_batches=self["recal.batches"],
            recal_batch=self["recal.batch"],
            ckpt_every=self["train.ckpt_every"],
        )
        if n == 1:
            warm = self[p + "warmup_steps"]
            common["warmup_steps"] = (max(1, it // 20) if it > 1 else 0) if warm is None else warm
        elif n == 2:
            common.update(
                grad_clip_norm=self[p + "grad_clip_norm"],
                ema_decay=self[p + "ema_decay"],
                select_ema=self[p + "select_ema"],
                weight_clip=(self[p + "weight_clip_lo"], self[p + "weight_clip_hi"]),
            )
        else:
            t1 = int(math.floor(it * self[p + "observer_off"]))
            t2 = int(math.floor(it * self[p + "freeze"]))
            common.update(
                weight_clip=(self[p + "weight_clip_lo"], self[p + "weight_clip_hi"]),
                qat_boundaries=(t1, t2),
                kd_end=self[p + "kd_end"],
                equalize=self[p + "equalize"],
                calib_batches=self[p + "calib_batches"],
            )
        return StageConfig(**common)
