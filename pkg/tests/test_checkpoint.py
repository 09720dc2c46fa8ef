import struct

import numpy as np
import pytest

from conftest import TINY, randomize_bn
from quantsr import checkpoint as ckpt
from quantsr.errors import InvalidState, ParseError
from quantsr.model import DeployModel, TrainModel, fuse_model
from quantsr.quant import QatModel, insert_qat, set_phase


def _arrays_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() and a[k].dtype == b[k].dtype for k in a)


def test_train_model_round_trip(tmp_path, rng):
    m = randomize_bn(TrainModel.init(TINY, 0), rng)
    m.bns()[0].num_batches_tracked = 7
    c = ckpt.make_checkpoint(m, 1, 42, best_psnr=30.5)
    c.save(tmp_path / "a.qsrc")
    loaded = ckpt.load(tmp_path / "a.qsrc")
    assert loaded.to_bytes() == c.to_bytes()
    assert loaded.stage == 1 and loaded.meta["step"] == 42 and loaded.meta["best_psnr"] == 30.5
    r = ckpt.restore_model(loaded)
    assert isinstance(r, TrainModel)
    assert _arrays_equal(r.named_arrays(), m.named_arrays())
    assert r.bns()[0].num_batches_tracked == 7


def test_deploy_and_qat_round_trip(rng):
    d = fuse_model(TrainModel.init(TINY, 0), warn_stale=False)
    r = ckpt.restore_model(ckpt.from_bytes(ckpt.make_checkpoint(d, "fused").to_bytes()))
    assert isinstance(r, DeployModel) and _arrays_equal(r.named_parameters(), d.named_parameters())
    q = insert_qat(d)
    q.calibrate([rng.random((1, 3, 6, 6), dtype=np.float32) for _ in range(2)])
    set_phase(q, 3, (1, 2))
    rq = ckpt.restore_model(ckpt.from_bytes(ckpt.make_checkpoint(q, 3).to_bytes()))
    assert isinstance(rq, QatModel)
    assert rq.phase == 3 and rq.state_snapshot() == q.state_snapshot()
    x = rng.random((1, 3, 5, 5), dtype=np.float32)
    with q.no_observe(), rq.no_observe():
        assert q.forward(x).tobytes() == rq.forward(x).tobytes()


def test_corruption_and_version_are_refused():
    data = ckpt.make_checkpoint(TrainModel.init(TINY, 0), 1).to_bytes()
    bad = bytearray(data)
    bad[len(bad) // 2] ^= 1
    with pytest.raises(ParseError, match="CRC"):
        ckpt.from_bytes(bytes(bad))
    with pytest.raises(ParseError, match="version"):
        ckpt.from_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(ParseError, match="magic"):
        ckpt.from_bytes(b"QSR1" + data[4:])
    with pytest.raises(ParseError):
        ckpt.from_bytes(data[:10])


def test_require_stage():
    c = ckpt.make_checkpoint(TrainModel.init(TINY, 0), 1)
    ckpt.require_stage(c, "train", (1, 2), "stage 2")
    with pytest.raises(InvalidState, match="stage 3"):
        ckpt.require_stage(c, "deploy", 3, "qat")


def test_shape_mismatch_is_invalid_state():
    c = ckpt.make_checkpoint(TrainModel.init(TINY, 0), 1)
    c.tensors["model.stem.weight"] = np.zeros((1, 3, 3, 3), np.float32)
    with pytest.raises(InvalidState):
        ckpt.restore_model(c)
