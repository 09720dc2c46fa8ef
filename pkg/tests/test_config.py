import pytest

from quantsr.config import SCHEMA, RunConfig
from quantsr.errors import InvalidArgument


def test_defaults_round_trip():
    cfg = RunConfig()
    text = cfg.serialize()
    again = RunConfig.parse(text)
    assert again == cfg
    assert again.serialize() == text
    assert RunConfig.parse(cfg.serialize(with_docs=True)) == cfg


def test_every_key_documented():
    assert all(entry.doc for entry in SCHEMA.values())


def test_overrides_and_types():
    cfg = RunConfig.parse("seed = 7\nstage2.ema_decay = none\nstage3.equalize = false\nstage1.lr0=0.002 # comment\n")
    assert cfg["seed"] == 7 and cfg["stage2.ema_decay"] is None
    assert cfg["stage3.equalize"] is False and cfg["stage1.lr0"] == 0.002
    assert RunConfig.parse(cfg.serialize()) == cfg


@pytest.mark.parametrize(
    "text",
    ["nope = 1", "seed = abc", "seed", "stage1.lr0 = none", "stage3.equalize = maybe", "stage1.lr0 = nan"],
)
def test_bad_lines(text):
    with pytest.raises(InvalidArgument):
        RunConfig.parse(text)


def test_stage_views():
    cfg = RunConfig()
    s1, s2, s3 = cfg.stage(1), cfg.stage(2), cfg.stage(3)
    assert (s1.iterations, s2.iterations, s3.iterations) == (300, 100, 75)
    assert s1.warmup_steps == 15 and s1.min_lr == pytest.approx(1e-5)
    assert s2.grad_clip_norm == 1.0 and s2.ema_decay == 0.999 and s2.weight_clip == (-1.5, 1.5)
    assert s3.batch == 1 and s3.qat_boundaries == (15, 45)
    cfg.set("stage3.iterations", "150")
    assert cfg.stage(3).qat_boundaries == (30, 90)
    assert cfg.student().channels == 32 and cfg.teacher().channels == 64
