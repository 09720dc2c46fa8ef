import copy

import numpy as np
import pytest

from conftest import TINY, randomize_bn
from oracles import naive_conv2d
from quantsr.errors import InvalidArgument
from quantsr.model import (
    DeployModel,
    StudentConfig,
    TrainBlock,
    TrainModel,
    fuse_block,
    fuse_model,
    interp_head_kernel,
    recalibrate_bn,
)
from quantsr.tensor import BNParams, ConvParams, batch_norm, finite_difference_check, pixel_shuffle


def _bn_eval(x, bn):
    return (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + bn.eps) * bn.gamma[
        None, :, None, None
    ] + bn.beta[None, :, None, None]


def test_single_block_model_matches_hand_composed_chain(rng):
    cfg = StudentConfig(num_blocks=1, channels=4, num_conv3_branches=2, init="uniform")
    m = randomize_bn(TrainModel.init(cfg, 0), rng)
    x = rng.random((1, 3, 5, 5)).astype(np.float32)
    blk = m.blocks[0]
    f0 = naive_conv2d(x, m.stem.weight, m.stem.bias)
    s = sum(_bn_eval(naive_conv2d(f0, c.weight, c.bias), bn) for c, bn in blk.branches())
    s = s + _bn_eval(naive_conv2d(f0, blk.conv1.weight, blk.conv1.bias), blk.bn1)
    s = s + _bn_eval(f0, blk.bn_id)
    f = np.maximum(s, 0) + f0
    z = naive_conv2d(f, m.head.weight, m.head.bias)
    expected = pixel_shuffle(z, 3)
    np.testing.assert_allclose(m.forward(x, "eval"), expected, atol=1e-6)


def test_identity_only_block_fuses_to_center_impulse():
    c = 3
    blk = TrainBlock.init(np.random.default_rng(0), c, 1)
    blk.bn3.gamma[...] = 0
    blk.bn1.gamma[...] = 0
    blk.bn_id = BNParams(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c) - 1e-5)
    p = fuse_block(blk)
    expected = np.zeros((c, c, 3, 3))
    expected[np.arange(c), np.arange(c), 1, 1] = 1
    np.testing.assert_allclose(p.weight, expected, atol=1e-7)
    np.testing.assert_allclose(p.bias, 0, atol=1e-7)


def test_zero_branches_fuse_to_zero_kernel_and_beta_terms(rng):
    c = 4
    blk = TrainBlock.init(rng, c, 2)
    for conv in (blk.conv3, blk.conv1):
        conv.weight[...] = 0
        conv.bias[...] = 0
    blk.bn_id.gamma[...] = 0
    for bn in blk.bns():
        bn.beta[...] = rng.normal(size=bn.channels)
    p = fuse_block(blk)
    np.testing.assert_array_equal(p.weight, 0)
    expected = blk.bn3.beta.reshape(2, c).sum(0) + blk.bn1.beta + blk.bn_id.beta
    np.testing.assert_allclose(p.bias, expected, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_random_block_fusion_equivalence(seed):
    rng = np.random.default_rng(seed)
    c = 6
    blk = TrainBlock.init(rng, c, 4)
    for bn in blk.bns():
        bn.gamma[...] = rng.uniform(0.5, 1.5, bn.channels)
        bn.beta[...] = rng.normal(0, 0.1, bn.channels)
        bn.running_mean[...] = rng.normal(0, 0.1, bn.channels)
        bn.running_var[...] = rng.uniform(0.5, 2, bn.channels)
    x = rng.random((2, c, 7, 7)).astype(np.float32)
    p = fuse_block(blk)
    from quantsr.tensor import conv2d, relu

    np.testing.assert_allclose(blk.forward(x, "eval"), relu(conv2d(x, p)), atol=1e-4)


def test_fused_model_has_no_bn_and_n_plus_2_convs(rng):
    m = randomize_bn(TrainModel.init(StudentConfig(), 0), rng)
    d = fuse_model(m, warn_stale=False)
    assert isinstance(d, DeployModel)
    assert len(d.convs()) == 8 + 2
    assert not any(isinstance(v, BNParams) for v in vars(d).values())
    assert all(p.weight.shape[2:] == (3, 3) for p in d.convs())


def test_default_parameter_count():
    d = fuse_model(TrainModel.init(StudentConfig(), 0), warn_stale=False)
    c = 32
    expected = 8 * (c * c * 9 + c) + (3 * c * 9 + c) + (c * 27 * 9 + 27)
    assert d.num_parameters() == expected == 82683


def test_fuse_twice_is_a_type_error():
    d = fuse_model(TrainModel.init(TINY, 0), warn_stale=False)
    with pytest.raises(TypeError):
        fuse_model(d)


def test_forward_shapes_and_no_training_clamp(rng):
    m = TrainModel.init(TINY, 0)
    x = rng.random((2, 3, 5, 4)).astype(np.float32)
    y = m.forward(x, "train")
    assert y.shape == (2, 3, 15, 12) and y.dtype == np.float32
    with pytest.raises(InvalidArgument):
        m.forward(rng.random((1, 4, 5, 5)))


def test_interp_init_starts_as_interpolator(rng):
    m = TrainModel.init(TINY, 0)
    x = np.full((1, 3, 6, 6), 0.4, np.float32)
    # partition of unity: a constant image stays (almost) constant in the interior
    y = fuse_model(m, warn_stale=False).forward(x, clamp=False)
    np.testing.assert_allclose(y[..., 3:-3, 3:-3], 0.4, atol=1e-2)
    taps = interp_head_kernel(3)
    np.testing.assert_allclose(taps.sum(axis=1), 1.0, atol=1e-6)


def test_model_gradients_finite_difference():
    cfg = StudentConfig(num_blocks=1, channels=4, num_conv3_branches=2, init="uniform")
    m = copy.deepcopy(TrainModel.init(cfg, 7))
    for p in [m.stem, m.head, m.blocks[0].conv3, m.blocks[0].conv1]:
        p.weight = p.weight.astype(np.float64)
        p.bias = p.bias.astype(np.float64)
    for bn in m.bns():
        for f in ("gamma", "beta", "running_mean", "running_var"):
            setattr(bn, f, getattr(bn, f).astype(np.float64))
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 4, 4))
    g = rng.normal(size=(2, 3, 12, 12))

    def loss(_):
        # params are perturbed in place; a copy keeps BN running stats untouched
        return float((copy.deepcopy(m).forward(x, "train") * g).sum())

    params = m.named_parameters()
    work = copy.deepcopy(m)
    cache = {}
    work.forward(x, "train", cache)
    grads = work.backward(g, cache)
    report = finite_difference_check(loss, params, grads, h=1e-6, max_coords=12)
    assert report.passed, report.message


def test_recalibrate_bn_sets_flag_and_train_forward_clears_it(rng):
    m = TrainModel.init(TINY, 0)
    batches = (rng.random((2, 3, 6, 6)).astype(np.float32) for _ in range(5))
    recalibrate_bn(m, batches, n=3)
    assert m.bn_recalibrated
    assert all(bn.num_batches_tracked == 3 for bn in m.bns())
    assert fuse_model(m).provenance["recalibrated"] is True
    m.forward(rng.random((1, 3, 6, 6)).astype(np.float32), "train")
    assert not m.bn_recalibrated


def test_recalibrate_bn_rejects_empty_iterator():
    with pytest.raises(InvalidArgument):
        recalibrate_bn(TrainModel.init(TINY, 0), iter(()), 4)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        StudentConfig(num_blocks=0)
    with pytest.raises(InvalidArgument):
        StudentConfig(init="zeros")
