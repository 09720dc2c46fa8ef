import csv
import math

import numpy as np
import pytest

from oracles import psnr_closed_form, ssim_constant
from quantsr.data import bicubic_resize, normalize
from quantsr.errors import InvalidArgument
from quantsr.evaluate import MetricReport, evaluate, gaussian_window, psnr_rgb, ssim
from quantsr.model import TrainModel, fuse_model


def test_psnr_closed_forms(rng):
    a = rng.random((3, 8, 8))
    assert psnr_rgb(a, a) == 100.0
    b = np.clip(a, 1 / 255, 1 - 1 / 255)
    assert psnr_rgb(b, b + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)
    c = np.zeros((3, 4, 4))
    d = c.copy()
    d[:, :2] = 2 / 255
    assert psnr_rgb(c, d) == pytest.approx(psnr_closed_form(2 / 255**2), abs=1e-9)
    assert psnr_rgb(c, d) == pytest.approx(45.12, abs=0.01)
    with pytest.raises(InvalidArgument):
        psnr_rgb(c, d[:, :3])


def test_psnr_symmetric_and_monotone(rng):
    a = rng.random((3, 16, 16))
    noise = rng.normal(size=a.shape)
    vals = [psnr_rgb(a, a + s * noise) for s in (0.01, 0.02, 0.05)]
    assert vals[0] > vals[1] > vals[2]
    assert psnr_rgb(a, a + 0.01 * noise) == psnr_rgb(a + 0.01 * noise, a)


def test_gaussian_window():
    g = gaussian_window()
    assert g.size == 11 and g.sum() == pytest.approx(1.0)
    assert g[5] == g.max() and g[0] == pytest.approx(g[10])


def test_ssim_identity_and_anticorrelation(rng):
    x = (rng.random((3, 16, 16)) > 0.5).astype(float)
    assert ssim(x, x) == 1.0
    assert ssim(x, 1 - x) < 0
    with pytest.raises(InvalidArgument):
        ssim(x[:, :10], x[:, :10])


def test_ssim_constant_images_scalar_oracle():
    a = np.full((3, 16, 16), 0.5)
    b = a + 0.03
    assert ssim(a, b) == pytest.approx(ssim_constant(0.5, 0.53), abs=1e-6)


def test_ssim_symmetric_and_shift_invariant(rng):
    a = 0.3 + 0.3 * rng.random((3, 20, 20))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert abs(ssim(a + 0.1, b + 0.1) - ssim(a, b)) <= 1e-3


def test_report_means_and_csv(tmp_path):
    r = MetricReport("fp32")
    r.add("a", 30.0, 0.9)
    r.add("b", 32.0, 0.8)
    assert r.mean_psnr == 31.0 and r.mean_ssim == pytest.approx(0.85, abs=1e-9)
    r.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["image", "mode", "psnr", "ssim"]
    assert rows[-1][0] == "mean" and float(rows[-1][2]) == 31.0


def test_bicubic_mode_is_resize_plus_metrics(tiny_pairs):
    rep = evaluate(None, tiny_pairs, "bicubic")
    for pair, p, s in zip(tiny_pairs, rep.psnr, rep.ssim):
        up = bicubic_resize(pair.lr, *pair.hr.shape[1:]).astype(float) / 255
        hr = pair.hr.astype(float) / 255
        assert p == psnr_rgb(up, hr) and s == ssim(up, hr)
    assert rep.mean_psnr == pytest.approx(np.mean(rep.psnr), abs=1e-9)


def test_model_against_its_own_outputs(tiny_pairs, tiny_config):
    from quantsr.data import ImagePair
    from quantsr.evaluate import predict_uint8

    d = fuse_model(TrainModel.init(tiny_config, 0), warn_stale=False)
    own = [ImagePair(p.lr, predict_uint8(d, p.lr, "fp32"), p.id) for p in tiny_pairs[:2]]
    assert evaluate(d, own, "fp32").psnr == [100.0, 100.0]


def test_evaluate_errors(tiny_pairs, tiny_config):
    with pytest.raises(InvalidArgument):
        evaluate(None, [], "bicubic")
    with pytest.raises(InvalidArgument):
        evaluate(None, tiny_pairs, "fp16")
    with pytest.raises(InvalidArgument):
        evaluate(TrainModel.init(tiny_config, 0), tiny_pairs, "fp32")
