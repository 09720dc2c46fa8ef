import csv

import numpy as np
import pytest

from conftest import TINY
from quantsr import checkpoint as ckpt
from quantsr.data import make_synthetic_dataset, normalize, split_dataset
from quantsr.errors import InvalidArgument, InvalidState
from quantsr.model import DeployModel, StudentConfig, TrainModel, fuse_model
from quantsr.quant import QatModel
from quantsr.train import (
    METRICS_HEADER,
    MetricsLog,
    StageConfig,
    default_stage_config,
    initial_student,
    run_stage,
)


@pytest.fixture(scope="module")
def split():
    pairs = make_synthetic_dataset("band-limited-noise", 6, 36, seed=11)
    return split_dataset(pairs, 2)


@pytest.fixture(scope="module")
def teachers(split):
    train, _ = split
    # a noisy copy of the ground truth stands in for the teacher
    rng = np.random.default_rng(0)
    return {p.id: np.clip(normalize(p.hr) + rng.normal(0, 0.02, p.hr.shape).astype(np.float32), 0, 1) for p in train}


def _cfg(stage, iterations, **kw):
    base = dict(patch=8, batch=2, val_every=max(1, iterations // 2), recal_batches=4, recal_batch=2, calib_batches=2)
    base.update(kw)
    return default_stage_config(stage, iterations, **base)


def test_stage_config_validation():
    with pytest.raises(InvalidArgument):
        StageConfig(stage=4, iterations=10, lr0=1e-3, patch=8, batch=1)
    with pytest.raises(InvalidArgument):
        StageConfig(stage=1, iterations=10, lr0=1e-3, patch=8, batch=1, warmup_steps=10)
    with pytest.raises(InvalidArgument):
        StageConfig(stage=1, iterations=10, lr0=1e-3, patch=8, batch=1, lr_min=1e-2)
    with pytest.raises(InvalidArgument):
        StageConfig(stage=3, iterations=10, lr0=1e-3, patch=8, batch=1, qat_boundaries=(5, 2))
    s = default_stage_config(3, 150)
    assert s.boundaries == (30, 90) and s.batch == 1 and s.lr0 == 1e-6


def test_stage_order_is_enforced(split, teachers):
    train, val = split
    m = TrainModel.init(TINY, 0)
    with pytest.raises(InvalidState, match="teacher"):
        run_stage(_cfg(2, 2), m, train, val)
    with pytest.raises(InvalidState):
        run_stage(_cfg(1, 2), fuse_model(m, warn_stale=False), train, val)
    with pytest.raises(InvalidArgument):
        run_stage(_cfg(1, 2), m, [], val)


def test_stage1_logs_and_selects_best(tmp_path, split):
    train, val = split
    log = MetricsLog(tmp_path / "m.csv")
    res = run_stage(_cfg(1, 6, lr0=1e-3), initial_student(TINY, 0), train, val, log=log)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == METRICS_HEADER and len(rows) == 7
    assert res.best_step in (3, 6) and res.best_psnr is not None
    assert isinstance(res.model, TrainModel)


def test_stage2_weight_clip_and_ema(split, teachers):
    train, val = split
    m = initial_student(TINY, 0)
    for v in m.named_parameters().values():
        if v.ndim == 4:
            v[...] = np.clip(v, -0.5, 0.5)
    seen = []

    def check(step, model):
        w = [v for k, v in model.named_parameters().items() if k.endswith(".weight")]
        seen.append(max(float(np.abs(a).max()) for a in w))

    cfg = _cfg(2, 4, weight_clip=(-0.25, 0.25), lr0=1e-2)
    res = run_stage(cfg, m, train, val, teachers, on_step=check)
    assert max(seen) <= 0.25
    # the EMA shadow (decay 0.999 over 4 steps) stays near the starting weights
    start = m.named_parameters()
    moved = max(float(np.abs(res.model.named_parameters()[k] - start[k]).max()) for k in start)
    assert moved < 0.01


def test_stage3_runs_curriculum_and_selects_phase3(split, teachers):
    train, val = split
    cfg = _cfg(3, 6, batch=1, qat_boundaries=(2, 4), val_every=1)
    phases = []
    res = run_stage(cfg, initial_student(TINY, 0), train, val, teachers, on_step=lambda s, q: phases.append(q.phase))
    assert phases == [1, 1, 2, 2, 3, 3]
    assert res.phase_transitions == [(2, 2), (4, 3)]
    assert isinstance(res.model, QatModel) and isinstance(res.fused, DeployModel)
    assert res.best_step in (5, 6)


def test_stage3_rejects_qat_model_without_resume(split, teachers):
    train, val = split
    res = run_stage(_cfg(3, 2, batch=1, qat_boundaries=(0, 1)), initial_student(TINY, 0), train, val, teachers)
    with pytest.raises(InvalidState):
        run_stage(_cfg(3, 2, batch=1), res.model, train, val, teachers)


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_resume_reproduces_uninterrupted_run(tmp_path, split, teachers, stage):
    train, val = split
    kw = dict(ckpt_every=3)
    if stage == 3:
        kw.update(batch=1, qat_boundaries=(2, 4))
    cfg = _cfg(stage, 6, **kw)
    t = teachers if stage > 1 else None
    full = run_stage(cfg, initial_student(TINY, 0), train, val, t)

    last = tmp_path / "last.qsrc"
    run_stage(cfg, initial_student(TINY, 0), train, val, t, last_path=last, stop_after=3)
    c = ckpt.load(last)
    assert c.meta["step"] == 3
    resumed = run_stage(cfg, ckpt.restore_model(c), train, val, t, resume=c)
    assert full.losses[3:] == resumed.losses
    a, b = full.model.named_parameters(), resumed.model.named_parameters()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_resume_rejects_wrong_stage(tmp_path, split):
    train, val = split
    cfg = _cfg(1, 4, ckpt_every=2)
    last = tmp_path / "l.qsrc"
    run_stage(cfg, initial_student(TINY, 0), train, val, last_path=last, stop_after=2)
    c = ckpt.load(last)
    with pytest.raises(InvalidState):
        run_stage(_cfg(2, 4), ckpt.restore_model(c), train, val, {"x": None}, resume=c)


def test_determinism(split):
    train, val = split
    a = run_stage(_cfg(1, 3), initial_student(TINY, 0), train, val)
    b = run_stage(_cfg(1, 3), initial_student(TINY, 0), train, val)
    assert a.losses == b.losses


@pytest.mark.slow
def test_stage1_halves_l1_from_random_init():
    """Training-regression oracle on the desk dataset, default student with
    plain fan-in uniform init (the interpolator init starts near the optimum)."""
    pairs = make_synthetic_dataset("band-limited-noise", 16, 96, seed=0)
    train, val = split_dataset(pairs, 4)
    model = initial_student(StudentConfig(init="uniform"), 0)
    res = run_stage(default_stage_config(1, 300), model, train)
    initial = res.losses[0]
    final = float(np.mean(res.losses[-10:]))
    print(f"stage-1 L1 {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f})")
    assert final <= 0.5 * initial
