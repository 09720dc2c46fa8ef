"""``quantsr`` command line.

Training commands share a *run directory* that accumulates the artifacts of
each step::

    config.txt            resolved configuration (rewritten by every command)
    teacher.qsrc          fused proxy teacher
    stage1.qsrc           best stage-1 multi-branch model
    stage2.qsrc           best stage-2 multi-branch model
    recal.qsrc            stage-2 model with recalibrated BN statistics
    fused.qsrc            single-conv deploy model
    qat.qsrc              frozen fake-quant model
    model.qsr             exported integer graph
    metrics_*.csv         per-step training logs
    eval_<mode>.csv       evaluation reports (pipeline)

Exit codes: 0 success, 1 user or configuration error, 2 internal failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import SCHEMA, RunConfig
from .data import (
    SCALE,
    denormalize,
    iterate_batches,
    load_dataset,
    load_png,
    load_teachers,
    make_synthetic_dataset,
    normalize,
    save_png,
    split_dataset,
    write_dataset,
)
from .errors import InvalidArgument, InvalidState
from .evaluate import MODES, MetricReport, evaluate, predict_uint8
from .graph import MAGIC as GRAPH_MAGIC
from .graph import DeployGraph, export_graph
from .model import DeployModel, TrainModel, fuse_model, recalibrate_bn
from .quant import QatModel
from .train import MetricsLog, initial_student, run_stage, train_proxy_teacher, write_teacher_cache

logger = logging.getLogger("quantsr")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
LOCK_NAME = ".quantsr.lock"
CONFIG_NAME = "config.txt"
FUSE_TOLERANCE = 1e-4

STAGE_FILES = {1: "stage1.qsrc", 2: "stage2.qsrc", "recal": "recal.qsrc", "fused": "fused.qsrc", 3: "qat.qsrc"}


class SelfCheckFailed(RuntimeError):
    pass


# -- plumbing ---------------------------------------------------------------------


@contextlib.contextmanager
def run_lock(directory: Path):
    """Reject a second command working on the same output directory."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InvalidState(f"{directory} is in use by another command (remove {path} if that process died)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def resolve_config(args, run_dir: Path | None = None) -> RunConfig:
    """defaults <- run_dir/config.txt <- --config <- --set key=value."""
    cfg = RunConfig()
    if run_dir is not None and (run_dir / CONFIG_NAME).exists() and args.config is None:
        cfg = RunConfig.load(run_dir / CONFIG_NAME)
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    for item in args.set or ():
        if "=" not in item:
            raise InvalidArgument(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        cfg.set(key, value)
    return cfg


def _threads(args) -> int | None:
    raw = args.threads if args.threads is not None else os.environ.get("QSR_THREADS")
    if raw in (None, ""):
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InvalidArgument(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise InvalidArgument(f"thread count must be >= 1, got {n}")
    return n


def _load_stage(run: Path, key, kind: str, what: str):
    path = run / STAGE_FILES[key]
    if not path.exists():
        label = f"stage {key}" if isinstance(key, int) else f"the {key} step"
        raise InvalidState(f"{what} needs the {label} output {path}; run {label} first")
    c = ckpt.load(path)
    ckpt.require_stage(c, kind, key, what)
    return ckpt.restore_model(c)


def _data(cfg: RunConfig, data_dir: Path):
    pairs = load_dataset(data_dir)
    return split_dataset(pairs, cfg["data.val_count"])


def _teachers(cfg: RunConfig, data_dir: Path, pairs):
    return load_teachers(data_dir, pairs, cfg["data.teacher_missing"])


def _data_dir(args, run: Path) -> Path:
    return Path(args.data) if args.data else run / "data"


def _stage_log(run: Path, name: str) -> MetricsLog:
    return MetricsLog(run / f"metrics_{name}.csv")


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    cfg = resolve_config(args)
    for flag, key in (("n", "data.n"), ("size", "data.size"), ("seed", "seed"), ("kind", "data.kind")):
        v = getattr(args, flag)
        if v is not None:
            cfg.set(key, v)
    gen_data(cfg, out, args.force)
    return EXIT_OK


def gen_data(cfg: RunConfig, out: Path, force: bool = False) -> None:
    size = cfg["data.size"]
    if size % SCALE:
        rounded = size - size % SCALE
        logger.warning("--size %d is not a multiple of %d; using %d", size, SCALE, rounded)
        cfg.set("data.size", rounded)
    if out.exists() and any(p.name != LOCK_NAME for p in out.iterdir()):
        if not force:
            raise InvalidArgument(f"{out} exists and is not empty; pass --force to overwrite it")
        for sub in ("hr", "lr", "teacher"):
            shutil.rmtree(out / sub, ignore_errors=True)
    with run_lock(out):
        pairs = make_synthetic_dataset(cfg["data.kind"], cfg["data.n"], cfg["data.size"], cfg["seed"])
        write_dataset(pairs, out)
        cfg.save(out / CONFIG_NAME)
    print(f"wrote {len(pairs)} pairs ({cfg['data.kind']}, HR {cfg['data.size']}px) to {out}")


def cmd_teacher(args) -> int:
    run = Path(args.run)
    cfg = resolve_config(args, run)
    with run_lock(run):
        teacher_step(cfg, run, _data_dir(args, run))
    return EXIT_OK


def teacher_step(cfg: RunConfig, run: Path, data_dir: Path) -> None:
    cfg.save(run / CONFIG_NAME)
    pairs = load_dataset(data_dir)
    train, val = split_dataset(pairs, cfg["data.val_count"])
    teacher = train_proxy_teacher(cfg.teacher(), cfg.teacher_stage(), train, val, _stage_log(run, "teacher"))
    ckpt.make_checkpoint(teacher, "teacher").save(run / "teacher.qsrc")
    write_teacher_cache(teacher, pairs, data_dir)
    if val:
        rep = evaluate(teacher, val, "fp32")
        print(f"teacher: {teacher.num_parameters()} parameters, held-out PSNR {rep.mean_psnr:.4f} dB")
    print(f"teacher predictions written to {data_dir / 'teacher'}")


def cmd_train(args) -> int:
    run = Path(args.run)
    cfg = resolve_config(args, run)
    with run_lock(run):
        train_step(cfg, run, _data_dir(args, run), args.stage, args.resume)
    return EXIT_OK


def train_step(cfg: RunConfig, run: Path, data_dir: Path, stage: int, resume: bool = False) -> None:
    if stage not in (1, 2):
        raise InvalidArgument("train handles stages 1 and 2; stage 3 is the qat command")
    scfg = cfg.stage(stage)
    last = run / f"stage{stage}_last.qsrc"
    resume_ck = None
    if resume:
        if not last.exists():
            raise InvalidState(f"no resumable checkpoint at {last}")
        resume_ck = ckpt.load(last)
        model = ckpt.restore_model(resume_ck)
    elif stage == 1:
        model = initial_student(cfg.student(), cfg["seed"])
    else:
        model = _load_stage(run, 1, "train", "stage 2")
    cfg.save(run / CONFIG_NAME)
    train, val = _data(cfg, data_dir)
    teachers = _teachers(cfg, data_dir, train) if stage == 2 else None
    log = MetricsLog(run / f"metrics_stage{stage}.csv", append=resume)
    res = run_stage(scfg, model, train, val, teachers, log, resume=resume_ck, last_path=last)
    ckpt.make_checkpoint(res.model, stage, scfg.iterations, best_psnr=res.best_psnr, best_step=res.best_step).save(
        run / STAGE_FILES[stage]
    )
    first, final = res.losses[0] if res.losses else float("nan"), res.losses[-1] if res.losses else float("nan")
    print(
        f"stage {stage}: loss {first:.5f} -> {final:.5f}, best held-out PSNR "
        f"{_fmt_db(res.best_psnr)} at step {res.best_step}, skipped steps {res.skipped_steps}"
    )


def _fmt_db(v) -> str:
    return "n/a" if v is None else f"{v:.4f} dB"


def cmd_recal_bn(args) -> int:
    run = Path(args.run)
    cfg = resolve_config(args, run)
    with run_lock(run):
        recal_step(cfg, run, _data_dir(args, run))
    return EXIT_OK


def recal_step(cfg: RunConfig, run: Path, data_dir: Path) -> None:
    model = _load_stage(run, 2, "train", "recal-bn")
    cfg.save(run / CONFIG_NAME)
    train, _ = _data(cfg, data_dir)
    patch = min(cfg["stage3.patch"], min(min(p.lr.shape[1:]) for p in train))
    rng = np.random.default_rng([cfg["seed"], 4])
    recalibrate_bn(model, iterate_batches(train, patch, cfg["recal.batch"], rng), cfg["recal.batches"])
    ckpt.make_checkpoint(model, "recal").save(run / STAGE_FILES["recal"])
    print(f"BN statistics recalibrated over {cfg['recal.batches']} batches")


def fusion_self_check(model: TrainModel, fused: DeployModel, seed: int = 0) -> float:
    """Max |multi-branch eval forward - fused forward| on random inputs."""
    x = np.random.default_rng([seed, 5]).random((2, 3, 16, 16), dtype=np.float32)
    a = model.forward(x, "eval")
    b = fused.forward(x, clamp=False)
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def cmd_fuse(args) -> int:
    run = Path(args.run)
    cfg = resolve_config(args, run)
    with run_lock(run):
        fuse_step(cfg, run)
    return EXIT_OK


def fuse_step(cfg: RunConfig, run: Path) -> None:
    model = _load_stage(run, "recal", "train", "fuse")
    cfg.save(run / CONFIG_NAME)
    fused = fuse_model(model)
    err = fusion_self_check(model, fused, cfg["seed"])
    ok = err <= FUSE_TOLERANCE
    print(f"fusion self-check: max |multi-branch - fused| = {err:.3e} (tolerance {FUSE_TOLERANCE:g}) {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise SelfCheckFailed("fused model does not reproduce the multi-branch model")
    ckpt.make_checkpoint(fused, "fused").save(run / STAGE_FILES["fused"])
    print(f"fused model: {fused.num_parameters()} parameters, {len(fused.convs())} convolutions")


def cmd_qat(args) -> int:
    run = Path(args.run)
    cfg = resolve_config(args, run)
    with run_lock(run):
        qat_step(cfg, run, _data_dir(args, run), args.resume)
    return EXIT_OK


def qat_step(cfg: RunConfig, run: Path, data_dir: Path, resume: bool = False) -> DeployGraph:
    scfg = cfg.stage(3)
    last = run / "stage3_last.qsrc"
    resume_ck = None
    if resume:
        if not last.exists():
            raise InvalidState(f"no resumable checkpoint at {last}")
        resume_ck = ckpt.load(last)
        model = ckpt.restore_model(resume_ck)
    else:
        model = _load_stage(run, "fused", "deploy", "qat")
    cfg.save(run / CONFIG_NAME)
    train, val = _data(cfg, data_dir)
    teachers = _teachers(cfg, data_dir, train)
    log = MetricsLog(run / "metrics_stage3.csv", append=resume)
    res = run_stage(scfg, model, train, val, teachers, log, resume=resume_ck, last_path=last)
    for step, phase in res.phase_transitions:
        print(f"QAT step {step}: phase {phase}")
    q = res.model
    if q.phase != 3:
        raise InvalidState(f"QAT ended in phase {q.phase}; freeze boundary {scfg.boundaries[1]} is past the last step")
    ckpt.make_checkpoint(q, 3, scfg.iterations, best_psnr=res.best_psnr, best_step=res.best_step).save(
        run / STAGE_FILES[3]
    )
    g = export_graph(q)
    g.save(run / "model.qsr")
    print(f"QAT done, best fake-quant PSNR {_fmt_db(res.best_psnr)}; integer graph written to {run / 'model.qsr'}")
    return g


def load_any_model(path: str | Path):
    """DeployGraph or checkpointed model, chosen by the file's magic bytes."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == GRAPH_MAGIC:
        return DeployGraph.load(path)
    if head == ckpt.MAGIC:
        return ckpt.restore_model(ckpt.load(path))
    raise InvalidArgument(f"{path}: not a quantsr model file (magic {head!r})")


def _as_mode(model, mode: str):
    """Adapt a loaded model to the requested evaluation path."""
    if mode == "bicubic":
        return None
    if mode == "fp32" and isinstance(model, TrainModel):
        return fuse_model(model)
    if mode == "fp32" and isinstance(model, QatModel):
        return model.model
    return model


def _default_mode(model) -> str:
    if isinstance(model, DeployGraph):
        return "int8"
    if isinstance(model, QatModel):
        return "fakequant"
    return "fp32"


def cmd_eval(args) -> int:
    cfg = resolve_config(args, Path(args.data))  # the dataset's config.txt fixes the held-out split
    if args.model is None and args.mode != "bicubic":
        raise InvalidArgument(f"--model is required for mode {args.mode}")
    model = load_any_model(args.model) if args.model else None
    mode = args.mode or _default_mode(model)
    pairs = load_dataset(args.data)
    if args.split != "all":
        train, val = split_dataset(pairs, cfg["data.val_count"])
        pairs = val if args.split == "val" else train
    out = Path(args.out or f"eval_{mode}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with run_lock(out.parent):
        rep = evaluate(_as_mode(model, mode), pairs, mode)
        rep.write_csv(out)
        cfg.save(out.parent / CONFIG_NAME)
    print(f"{mode}: mean PSNR {rep.mean_psnr:.4f} dB, mean SSIM {rep.mean_ssim:.4f} over {rep.count} images -> {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    model = load_any_model(args.model)
    mode = _default_mode(model)
    model = _as_mode(model, mode)
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        jobs = [(p, dst / p.name) for p in sorted(src.glob("*.png"))]
        if not jobs:
            raise InvalidArgument(f"{src}: no PNG files")
    else:
        jobs = [(src, dst)]
    budget = cfg["infer.max_output_pixels"]
    images = []
    for s, d in jobs:
        img = load_png(s)
        h, w = img.shape[1:]
        if SCALE * h * SCALE * w > budget:
            raise InvalidArgument(
                f"{s}: x{SCALE} output {SCALE * w}x{SCALE * h} exceeds the size budget "
                f"infer.max_output_pixels={budget}"
            )
        images.append((img, d))
    out_dir = dst if src.is_dir() else dst.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with run_lock(out_dir):
        for img, d in images:
            save_png(predict_uint8(model, img, mode), d)
        cfg.save(out_dir / CONFIG_NAME)
    print(f"{mode}: wrote {len(images)} image(s) to {dst}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    run = Path(args.out)
    cfg = resolve_config(args, run)
    pipeline(cfg, run, args.force)
    return EXIT_OK


def pipeline(cfg: RunConfig, run: Path, force: bool = False) -> dict[str, MetricReport]:
    """gen-data -> teacher -> stage 1 -> stage 2 -> recal-bn -> fuse -> qat -> eval."""
    if run.exists() and any(p.name != LOCK_NAME for p in run.iterdir()) and not force:
        raise InvalidArgument(f"{run} exists and is not empty; pass --force to overwrite it")
    data_dir = run / "data"
    gen_data(cfg, data_dir, force=True)
    with run_lock(run):
        teacher_step(cfg, run, data_dir)
        train_step(cfg, run, data_dir, 1)
        train_step(cfg, run, data_dir, 2)
        recal_step(cfg, run, data_dir)
        fuse_step(cfg, run)
        graph = qat_step(cfg, run, data_dir)
        _, val = _data(cfg, data_dir)
        if not val:
            raise InvalidArgument("pipeline evaluation needs data.val_count >= 1")
        fused = ckpt.restore_model(ckpt.load(run / STAGE_FILES["fused"]))
        qat = ckpt.restore_model(ckpt.load(run / STAGE_FILES[3]))
        models = {"bicubic": None, "fp32": fused, "fakequant": qat, "int8": graph}
        reports = {}
        for mode in MODES:
            rep = evaluate(models[mode], val, mode)
            rep.write_csv(run / f"eval_{mode}.csv")
            reports[mode] = rep
        with open(run / "summary.csv", "w") as f:
            f.write("mode,psnr,ssim\n")
            for mode, rep in reports.items():
                f.write(f"{mode},{rep.mean_psnr:.6f},{rep.mean_ssim:.6f}\n")
    print(f"held-out split: {len(val)} images")
    for mode, rep in reports.items():
        print(f"  {mode:<10} PSNR {rep.mean_psnr:8.4f} dB  SSIM {rep.mean_ssim:.4f}")
    print(f"fp32 - bicubic: {reports['fp32'].mean_psnr - reports['bicubic'].mean_psnr:+.4f} dB")
    print(f"int8 - fp32:    {reports['int8'].mean_psnr - reports['fp32'].mean_psnr:+.4f} dB")
    return reports


def cmd_show_config(args) -> int:
    sys.stdout.write(resolve_config(args).serialize(with_docs=True))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--threads", help="BLAS thread count (default: $QSR_THREADS or library default)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    p = argparse.ArgumentParser(prog="quantsr", description="Re-parameterizable x3 super-resolution with INT8 export.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic HR/LR dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--size", type=int, help="HR side length; rounded down to a multiple of 3")
    g.add_argument("--seed", type=int)
    g.add_argument("--kind", help="gradients, checkerboards, gaussian-blobs, band-limited-noise or mixed")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def run_cmd(name, func, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--run", required=True, help="run directory")
        s.add_argument("--data", help="dataset directory (default: <run>/data)")
        s.set_defaults(func=func)
        return s

    run_cmd("teacher", cmd_teacher, "train the proxy teacher and cache its predictions")
    t = run_cmd("train", cmd_train, "run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--resume", action="store_true", help="continue from the last periodic checkpoint")
    run_cmd("recal-bn", cmd_recal_bn, "recompute BN statistics of the stage-2 model")
    run_cmd("fuse", cmd_fuse, "collapse branches into single convolutions (with self-check)")
    q = run_cmd("qat", cmd_qat, "quantization-aware fine-tuning and integer graph export")
    q.add_argument("--resume", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="evaluate a model or the bicubic baseline")
    e.add_argument("--model", help="checkpoint (.qsrc) or integer graph (.qsr)")
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=MODES, help="default: inferred from the model file")
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--out", help="CSV report path (default: eval_<mode>.csv)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="super-resolve a PNG or a directory of PNGs")
    i.add_argument("--model", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", dest="output", required=True)
    i.set_defaults(func=cmd_infer)

    pl = sub.add_parser("pipeline", parents=[common], help="run every step end to end")
    pl.add_argument("--out", required=True, help="run directory")
    pl.add_argument("--force", action="store_true")
    pl.set_defaults(func=cmd_pipeline)

    c = sub.add_parser("config", parents=[common], help="print the resolved configuration with documentation")
    c.set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(line_buffering=True)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        n = _threads(args)
        if n is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            return args.func(args)
    except (InvalidArgument, InvalidState, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except SelfCheckFailed as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # invariant violations and bugs
        logger.exception("unexpected failure")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


__all__ = ["SCHEMA", "build_parser", "main", "pipeline"]
