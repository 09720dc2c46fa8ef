"""Three-stage training driver.

Stage 1 fits the multi-branch student with L1. Stage 2 adds Charbonnier, DCT
and confidence-weighted distillation, with gradient clipping, weight clipping
and an EMA of the weights. Stage 3 recalibrates BN, fuses, inserts fake
quantization and fine-tunes the fused graph through the observe / freeze-grid /
freeze-all curriculum.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import ImagePair, denormalize, iterate_batches, normalize, sample_batch, save_png
from .errors import InvalidArgument, InvalidState
from .evaluate import evaluate
from .losses import STAGE2_WEIGHTS, STAGE3_WEIGHTS, LossWeights, stage_loss
from .model import DeployModel, StudentConfig, TrainModel, fuse_model, recalibrate_bn
from .optim import Adam, clip_grad_norm, clip_weights, ema_update, lr_schedule
from .quant import QatModel, default_boundaries, equalize_skip_ranges, insert_qat, set_phase

logger = logging.getLogger(__name__)

# desk-scale iteration counts keep the 600:200:150 proportions
DESK_ITERATIONS = {1: 300, 2: 100, 3: 75}
DEFAULT_PATCH = {1: 128, 2: 160, 3: 144}
DEFAULT_LR0 = {1: 1e-3, 2: 3e-5, 3: 1e-6}
DEFAULT_BATCH = {1: 8, 2: 8, 3: 1}

METRICS_HEADER = (
    "stage",
    "step",
    "lr",
    "loss",
    "l1",
    "char",
    "dct",
    "kd",
    "lambda_kd",
    "grad_norm",
    "phase",
    "val_psnr",
    "val_ssim",
)


@dataclass(frozen=True)
class StageConfig:
    stage: int
    iterations: int
    lr0: float
    patch: int
    batch: int
    warmup_steps: int = 0
    lr_min: float | None = None  # None -> lr0 / 100
    grad_clip_norm: float | None = None
    ema_decay: float | None = None
    select_ema: bool = True  # validate and return the EMA weights rather than the raw ones
    weight_clip: tuple[float, float] | None = None
    qat_boundaries: tuple[int, int] | None = None
    val_every: int = 50
    kd_end: float = 0.01
    recal_batches: int = 64
    recal_batch: int = 8
    calib_batches: int = 8
    equalize: bool = True
    seed: int = 0
    ckpt_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise InvalidArgument(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.iterations < 1 or self.batch < 1 or self.patch < 1:
            raise InvalidArgument("iterations, batch and patch must be >= 1")
        if not 0 <= self.warmup_steps < self.iterations:
            raise InvalidArgument(f"warmup_steps {self.warmup_steps} must be < iterations {self.iterations}")
        if not self.lr0 > self.min_lr >= 0:
            raise InvalidArgument(f"need lr0 > lr_min >= 0, got {self.lr0}, {self.min_lr}")
        if self.weight_clip is not None and not self.weight_clip[0] < self.weight_clip[1]:
            raise InvalidArgument(f"weight clip needs lo < hi, got {self.weight_clip}")
        if self.qat_boundaries is not None and self.qat_boundaries[0] > self.qat_boundaries[1]:
            raise InvalidArgument(f"QAT boundaries must satisfy t1 <= t2, got {self.qat_boundaries}")

    @property
    def min_lr(self) -> float:
        return self.lr0 / 100 if self.lr_min is None else self.lr_min

    @property
    def boundaries(self) -> tuple[int, int]:
        return self.qat_boundaries if self.qat_boundaries is not None else default_boundaries(self.iterations)


def default_stage_config(stage: int, iterations: int | None = None, **overrides) -> StageConfig:
    it = DESK_ITERATIONS[stage] if iterations is None else iterations
    base = dict(stage=stage, iterations=it, lr0=DEFAULT_LR0[stage], patch=DEFAULT_PATCH[stage], batch=DEFAULT_BATCH[stage])
    if stage == 1:
        base["warmup_steps"] = max(1, it // 20) if it > 1 else 0
    elif stage == 2:
        base.update(grad_clip_norm=1.0, ema_decay=0.999, weight_clip=(-1.5, 1.5))
    else:
        base.update(weight_clip=(-1.5, 1.5))
    base.update(overrides)
    return StageConfig(**base)


# -- metrics log -------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


class MetricsLog:
    """Per-step CSV rows with a fixed header; optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None, append: bool = False):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None and not (append and self.path.exists()):
            with open(self.path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(METRICS_HEADER)

    def write(self, row: dict) -> None:
        unknown = set(row) - set(METRICS_HEADER)
        if unknown:
            raise InvalidArgument(f"unknown metrics columns {sorted(unknown)}")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([_fmt(row.get(k)) for k in METRICS_HEADER])


# -- stage driver -------------------------------------------------------------------


@dataclass
class StageResult:
    model: object  # best model (TrainModel, or QatModel for stage 3)
    best_psnr: float | None
    best_step: int | None
    losses: list[float] = field(default_factory=list)
    skipped_steps: int = 0
    phase_transitions: list[tuple[int, int]] = field(default_factory=list)
    fused: DeployModel | None = None  # stage 3: the fused FP32 model QAT started from


def _clamp_patch(p: int, pairs: Sequence[ImagePair]) -> int:
    smallest = min(min(pair.lr.shape[1:]) for pair in pairs)
    if p > smallest:
        logger.info("patch %d clamped to %d to fit the LR images", p, smallest)
    return min(p, smallest)


def _weights_only(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if k.endswith(".weight")}


def _with_params(model: TrainModel, params: dict[str, np.ndarray]) -> TrainModel:
    m = copy.deepcopy(model)
    for name, arr in m.named_parameters().items():
        arr[...] = params[name]
    return m


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def prepare_qat(
    model, pairs: Sequence[ImagePair], cfg: StageConfig, rng: np.random.Generator
) -> tuple[QatModel, DeployModel]:
    """Recalibrate BN (if still multi-branch), fuse, optionally equalize the
    skip-space channel ranges, insert fake-quant nodes and seed every observer
    with a few float forward passes. Returns the QAT model and the fused model."""
    patch = _clamp_patch(cfg.patch, pairs)
    if isinstance(model, TrainModel):
        m = copy.deepcopy(model)
        recalibrate_bn(m, iterate_batches(pairs, patch, cfg.recal_batch, rng), cfg.recal_batches)
        model = fuse_model(m)
    if not isinstance(model, DeployModel):
        raise InvalidState(f"stage 3 needs a multi-branch or fused model, got {type(model).__name__}")
    start = model
    if cfg.equalize:
        start = equalize_skip_ranges(model, iterate_batches(pairs, patch, cfg.recal_batch, rng), cfg.calib_batches)
    q = insert_qat(start)
    q.calibrate(iterate_batches(pairs, patch, cfg.batch, rng), cfg.calib_batches)
    return q, model


def run_stage(
    cfg: StageConfig,
    model,
    train_pairs: Sequence[ImagePair],
    val_pairs: Sequence[ImagePair] = (),
    teachers: dict[str, np.ndarray] | None = None,
    log: MetricsLog | None = None,
    resume: ckpt.Checkpoint | None = None,
    last_path: str | Path | None = None,
    on_step: Callable[[int, object], None] | None = None,
    stop_after: int | None = None,
) -> StageResult:
    """Train one curriculum stage and return the best validated model.

    ``resume`` continues from a mid-stage checkpoint written to ``last_path``;
    ``stop_after`` ends the loop early after that many steps (for tests and
    interrupted runs). ``on_step(step, model)`` runs after every update.
    """
    if not train_pairs:
        raise InvalidArgument("training split is empty")
    stage = cfg.stage
    patch = _clamp_patch(cfg.patch, train_pairs)
    rng = np.random.default_rng([cfg.seed, stage])
    log = log or MetricsLog()

    if stage in (1, 2) and not isinstance(model, TrainModel):
        raise InvalidState(f"stage {stage} trains the multi-branch model; got {type(model).__name__}")
    if stage in (2, 3) and not teachers:
        raise InvalidState(f"stage {stage} needs teacher predictions; build the teacher cache first")

    model = copy.deepcopy(model)  # never train the caller's instance in place
    fused = None
    if stage == 3 and resume is None:
        if isinstance(model, QatModel):
            raise InvalidState("model already carries fake-quant nodes; resume from its checkpoint instead")
        model, fused = prepare_qat(model, train_pairs, cfg, rng)
    elif stage == 3 and not isinstance(model, QatModel):
        raise InvalidState("resuming stage 3 needs the QAT model restored from the checkpoint")

    params = model.named_parameters()
    opt = Adam()
    ema = _snapshot(params) if cfg.ema_decay is not None else None
    weight_clip = cfg.weight_clip
    if stage == 3 and weight_clip is not None:
        # fused kernels can legitimately exceed the training bounds; never clip the starting point
        w = _weights_only(params)
        lo = min(weight_clip[0], min(float(v.min()) for v in w.values()))
        hi = max(weight_clip[1], max(float(v.max()) for v in w.values()))
        weight_clip = (lo, hi)

    start = 0
    best_psnr, best_step, best = None, None, None
    if resume is not None:
        start, best_psnr, best_step, best, ema, weight_clip = _load_resume(resume, cfg, opt, rng, ema, weight_clip)

    weights = STAGE2_WEIGHTS if stage == 2 else STAGE3_WEIGHTS
    use_ema = ema is not None and cfg.select_ema
    boundaries = cfg.boundaries
    result = StageResult(model, None, None, fused=fused)
    end = cfg.iterations if stop_after is None else min(cfg.iterations, start + stop_after)

    for step in range(start, end):
        if stage == 3:
            before = model.phase
            set_phase(model, step, boundaries)
            if model.phase != before:
                result.phase_transitions.append((step, model.phase))
                logger.info("QAT step %d: entering phase %d", step, model.phase)
        lr = lr_schedule(step, cfg.lr0, cfg.iterations, cfg.warmup_steps, cfg.min_lr)
        x, y, t = sample_batch(train_pairs, patch, cfg.batch, rng, teachers if stage > 1 else None)
        cache: dict = {}
        pred = model.forward(x, cache=cache) if stage == 3 else model.forward(x, "train", cache)
        if stage > 1 and t is None:
            # no teacher for this batch: drop the distillation term
            loss, g, parts = stage_loss(stage, pred, y, y, replace(weights, w_kd=0.0), step, cfg.iterations, 0.0)
        else:
            loss, g, parts = stage_loss(stage, pred, y, t, weights, step, cfg.iterations, cfg.kd_end)
        grads = model.backward(g, cache)
        gnorm = None
        if cfg.grad_clip_norm is not None:
            gnorm = clip_grad_norm(grads, cfg.grad_clip_norm)
        opt.step(params, grads, lr)
        if weight_clip is not None:
            clip_weights(_weights_only(params), *weight_clip)
        if ema is not None:
            ema_update(ema, params, cfg.ema_decay)
        result.losses.append(loss)

        row = dict(stage=stage, step=step, lr=lr, loss=loss, grad_norm=gnorm, **parts)
        if stage == 3:
            row["phase"] = model.phase
        done = step + 1
        if val_pairs and (done % cfg.val_every == 0 or done == cfg.iterations):
            psnr, ssim_v = _validate(model, ema if use_ema else None, val_pairs)
            row.update(val_psnr=psnr, val_ssim=ssim_v)
            eligible = stage != 3 or model.phase == 3
            if eligible and (best_psnr is None or psnr > best_psnr):
                best_psnr, best_step = psnr, done
                best = _snapshot(ema if use_ema else params)
        log.write(row)
        if on_step is not None:
            on_step(step, model)
        if last_path is not None and cfg.ckpt_every and done % cfg.ckpt_every == 0 and done < cfg.iterations:
            _save_resume(last_path, model, cfg, done, opt, rng, ema, best, best_psnr, best_step, weight_clip)

    result.skipped_steps = opt.skipped
    final = ema if use_ema else params
    chosen = best if best is not None else final
    if isinstance(model, TrainModel):
        result.model = _with_params(model, chosen)
    else:
        out = copy.deepcopy(model)
        for name, arr in out.named_parameters().items():
            arr[...] = chosen[name]
        result.model = out
    result.best_psnr, result.best_step = best_psnr, best_step
    return result


def _validate(model, ema, pairs) -> tuple[float, float]:
    if isinstance(model, QatModel):
        rep = evaluate(model, pairs, "fakequant")
    else:
        m = _with_params(model, ema) if ema is not None else model
        rep = evaluate(fuse_model(m, warn_stale=False), pairs, "fp32")
    return rep.mean_psnr, rep.mean_ssim


def _save_resume(path, model, cfg, step, opt, rng, ema, best, best_psnr, best_step, weight_clip) -> None:
    c = ckpt.make_checkpoint(
        model,
        cfg.stage,
        step,
        resume={
            "adam_t": opt.t,
            "adam_skipped": opt.skipped,
            "rng": rng.bit_generator.state,
            "best_psnr": best_psnr,
            "best_step": best_step,
            "weight_clip": list(weight_clip) if weight_clip is not None else None,
        },
    )
    c.tensors.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    if ema is not None:
        c.tensors.update({f"ema.{k}": v for k, v in ema.items()})
    if best is not None:
        c.tensors.update({f"best.{k}": v for k, v in best.items()})
    c.save(path)


def _load_resume(c: ckpt.Checkpoint, cfg, opt, rng, ema, weight_clip):
    r = c.meta.get("resume")
    if r is None:
        raise InvalidState("checkpoint has no resume state (it is a finished-stage checkpoint)")
    if c.stage != cfg.stage:
        raise InvalidState(f"cannot resume stage {cfg.stage} from a stage {c.stage} checkpoint")
    t = c.tensors
    opt.load_state(r["adam_t"], r["adam_skipped"], {k[4:]: v for k, v in t.items() if k.startswith("opt.")})
    rng.bit_generator.state = r["rng"]
    if ema is not None:
        ema = {k[4:]: v.copy() for k, v in t.items() if k.startswith("ema.")}
    best = {k[5:]: v.copy() for k, v in t.items() if k.startswith("best.")} or None
    wc = tuple(r["weight_clip"]) if r["weight_clip"] is not None else weight_clip
    return int(c.meta["step"]), r["best_psnr"], r["best_step"], best, ema, wc


# -- proxy teacher --------------------------------------------------------------------


def train_proxy_teacher(
    config: StudentConfig,
    cfg: StageConfig,
    train_pairs: Sequence[ImagePair],
    val_pairs: Sequence[ImagePair] = (),
    log: MetricsLog | None = None,
) -> DeployModel:
    """Fit a wider FP32 network with the stage-1 objective and return it fused."""
    if cfg.stage != 1:
        raise InvalidArgument("the proxy teacher is trained with the stage-1 objective")
    model = TrainModel.init(config, np.random.default_rng([cfg.seed, 99]))
    res = run_stage(cfg, model, train_pairs, val_pairs, log=log)
    return fuse_model(res.model, warn_stale=False)


def write_teacher_cache(teacher: DeployModel, pairs: Sequence[ImagePair], dataset_dir: str | Path) -> None:
    """Write one HR-sized PNG prediction per image under ``<dataset_dir>/teacher``."""
    for pair in pairs:
        y = teacher.forward(normalize(pair.lr)[None], clamp=True)[0]
        save_png(denormalize(y), Path(dataset_dir) / "teacher" / f"{pair.id}.png")


def initial_student(config: StudentConfig, seed: int) -> TrainModel:
    return TrainModel.init(config, np.random.default_rng([seed, 0]))
