import math

import numpy as np
import pytest

from bnfair.core import RngStream, Tape, Tensor, check_gradients, mean, tsum
from bnfair.nn import (FROZEN_STATS, IDENTITY, PROJECTION, UPDATE_STATS, BackboneSpec, BatchNorm,
                       BatchNormError, Linear, Model, ResidualBlock, ResidualBlockSpec,
                       batch_norm, bce_with_logits, checkpoint_bytes, clone_model,
                       head_forward_bce, load_checkpoint, model_from_bytes, save_checkpoint)


def _bn(features, mode, gamma=None, beta=None):
    bn = BatchNorm(features)
    bn.stats_mode = mode
    if gamma is not None:
        bn.gamma = Tensor(gamma)
    if beta is not None:
        bn.beta = Tensor(beta)
    return bn


# -- batch norm ----------------------------------------------------------------

def test_frozen_identity_configuration():
    x = np.random.default_rng(0).normal(size=(5, 3))
    out = _bn(3, FROZEN_STATS)(Tensor(x)).data
    np.testing.assert_allclose(out, x, rtol=1e-5)


def test_update_stats_hand_example():
    bn = _bn(1, UPDATE_STATS)
    out = bn(Tensor([[1.0], [3.0]])).data
    np.testing.assert_allclose(out, [[-0.999995], [0.999995]], rtol=1e-6)
    assert bn.running_mean[0] == pytest.approx(0.2)
    assert bn.running_var[0] == pytest.approx(1.1)


def test_frozen_never_mutates_buffers():
    bn = _bn(4, FROZEN_STATS)
    bn.running_mean = np.array([0.1, -0.2, 0.3, 0.0])
    bn.running_var = np.array([1.5, 0.5, 2.0, 1.0])
    before = bn.running_mean.tobytes() + bn.running_var.tobytes()
    bn(Tensor(np.random.default_rng(1).normal(size=(8, 4))))
    assert bn.running_mean.tobytes() + bn.running_var.tobytes() == before


def test_update_stats_output_moments():
    rng = np.random.default_rng(2)
    gamma, beta = rng.uniform(0.5, 2, 6), rng.normal(size=6)
    x = rng.normal(3.0, 4.0, size=(256, 6))
    out = _bn(6, UPDATE_STATS, gamma, beta)(Tensor(x)).data
    assert np.max(np.abs(out.mean(axis=0) - beta)) <= 1e-10
    np.testing.assert_allclose(out.var(axis=0), gamma ** 2, rtol=1e-6)


def test_ema_converges_on_fixed_distribution():
    bn = _bn(8, UPDATE_STATS)
    rng = RngStream(0)
    for _ in range(500):
        bn(Tensor(rng.normal((256, 8))))
    assert np.max(np.abs(bn.running_mean)) <= 0.05
    assert np.max(np.abs(bn.running_var - 1)) <= 0.1


def test_recalibration_geometric_rate():
    bn = _bn(3, UPDATE_STATS)
    x = np.random.default_rng(4).normal(2.0, 3.0, size=(16, 3))
    target_mu, target_var = x.mean(axis=0), x.var(axis=0, ddof=1)
    errs = []
    for _ in range(20):
        bn(Tensor(x))
        errs.append(np.abs(bn.running_mean - target_mu))
    for k in range(1, 20):
        np.testing.assert_allclose(errs[k], 0.9 * errs[k - 1], rtol=1e-9)
    np.testing.assert_allclose(np.abs(bn.running_var - target_var),
                               0.9 ** 20 * np.abs(1 - target_var), rtol=1e-9)


def test_bn_gradcheck_both_modes():
    rng = np.random.default_rng(5)
    x, gamma, beta = rng.normal(size=(4, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
    w = rng.normal(size=(4, 3))
    for mode in (FROZEN_STATS, UPDATE_STATS):
        def build(x, g, b, mode=mode):
            bn = _bn(3, mode)
            bn.running_mean, bn.running_var = np.array([0.1, 0.2, -0.3]), np.array([1.2, 0.7, 2.0])
            bn.gamma, bn.beta = g, b
            return tsum(batch_norm(x, bn) * Tensor(w))
        assert check_gradients(build, [x, gamma, beta]) <= 1e-6


def test_zero_gamma_blocks_input_gradient():
    with Tape() as tape:
        x = Tensor(np.random.default_rng(6).normal(size=(4, 3)), requires_grad=True)
        bn = _bn(3, UPDATE_STATS, gamma=np.zeros(3))
        tape.backward(tsum(bn(x) * Tensor(np.arange(12.0).reshape(4, 3))))
    assert np.all(x.grad == 0)


def test_bn_input_validation():
    with pytest.raises(BatchNormError):
        _bn(3, UPDATE_STATS)(Tensor(np.ones((1, 3))))
    with pytest.raises(BatchNormError):
        _bn(3, FROZEN_STATS)(Tensor(np.ones((2, 4))))
    bn = _bn(2, FROZEN_STATS)
    bn.running_var = np.array([1.0, -1.0])
    with pytest.raises(BatchNormError):
        bn(Tensor(np.ones((2, 2))))


def test_bn_initial_state():
    bn = BatchNorm(5)
    assert bn.gamma.data.tolist() == [1.0] * 5 and bn.beta.data.tolist() == [0.0] * 5
    assert bn.running_mean.tolist() == [0.0] * 5 and bn.running_var.tolist() == [1.0] * 5


# -- residual block --------------------------------------------------------------

def _zero_block(kind, in_width=4, width=4):
    block = ResidualBlock(in_width, ResidualBlockSpec(width, kind))
    for _, bn in block.batchnorms():
        bn.stats_mode = UPDATE_STATS
    return block


def test_zero_weights_identity_skip_is_relu():
    x = np.random.default_rng(7).normal(size=(6, 4))
    out = _zero_block(IDENTITY)(Tensor(x)).data
    assert np.array_equal(out, np.maximum(x, 0))


def test_zero_weights_zero_projection_is_zero():
    out = _zero_block(PROJECTION, 3, 4)(Tensor(np.random.default_rng(8).normal(size=(6, 3)))).data
    assert np.all(out == 0)


def test_block_gradcheck():
    rng = np.random.default_rng(9)
    block = ResidualBlock(3, ResidualBlockSpec(4, PROJECTION), RngStream(1))
    for _, bn in block.batchnorms():
        bn.stats_mode = UPDATE_STATS
    params = [t for _, t in block.named_parameters()]
    inputs = [rng.normal(size=(5, 3))] + [t.data.copy() for t in params]
    w = rng.normal(size=(5, 4))

    # swap parameter tensors in by path so the tape sees the new leaves
    paths = [p for p, _ in block.named_parameters()]

    def build_by_path(x, *ps):
        for path, p in zip(paths, ps):
            owner = block
            *parts, attr = path.split(".")
            for part in parts:
                owner = getattr(owner, part)
            setattr(owner, attr, p)
        return tsum(block(x) * Tensor(w))

    assert check_gradients(build_by_path, inputs) <= 1e-6


# -- head -----------------------------------------------------------------------

def test_zero_logits_give_half_and_ln2():
    scores, loss = head_forward_bce(Tensor(np.ones((3, 2))), Linear(2, 4), np.ones((3, 4)))
    assert np.all(scores == 0.5)
    assert loss.item() == pytest.approx(math.log(2))


def test_confident_correct_logit_has_no_loss():
    assert bce_with_logits(Tensor([[800.0]]), [[1]]).item() == 0.0


def test_bce_gradcheck():
    rng = np.random.default_rng(10)
    y = rng.integers(0, 2, size=(3, 4))
    assert check_gradients(lambda z: bce_with_logits(z, y), [rng.normal(size=(3, 4))]) <= 1e-6


def test_bce_rejects_bad_labels():
    with pytest.raises(ValueError):
        bce_with_logits(Tensor(np.zeros((1, 2))), [[0, 2]])


# -- model ------------------------------------------------------------------------

def test_default_backbone_shape_and_paths():
    m = Model(BackboneSpec(), num_outputs=11, seed=0)
    paths = [p for p, _ in m.named_parameters()] + [p for p, _, _ in m.named_buffers()]
    assert len(paths) == len(set(paths))
    assert paths == [p for p, _ in Model(BackboneSpec(), 11, seed=5).named_parameters()] + \
        [p for p, _, _ in Model(BackboneSpec(), 11, seed=5).named_buffers()]
    assert "backbone.block0.skip.fc.weight" in paths and "backbone.block2.skip.bn.gamma" in paths
    assert "backbone.block1.skip.fc.weight" not in paths
    assert m.parameters_dict()["backbone.block0.skip.fc.weight"].shape == (64, 128)
    assert m(Tensor(np.zeros((2, 64)))).shape == (2, 11)


def test_backbone_requires_projection():
    with pytest.raises(ValueError):
        BackboneSpec(input_dim=4, width=4, embedding_dim=4, blocks=[ResidualBlockSpec(4)])


def test_checkpoint_roundtrip(tmp_path, small_backbone):
    m = Model(small_backbone, num_outputs=3, seed=2)
    m.backbone.blocks[0].bn1.running_var[:] = 2.5
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, str(path), extra={"note": "x"})
    loaded, extra = load_checkpoint(str(path))
    assert extra == {"note": "x"}
    assert checkpoint_bytes(loaded, extra) == checkpoint_bytes(m, extra)
    assert checkpoint_bytes(clone_model(m)) == checkpoint_bytes(m)
    with pytest.raises(ValueError):
        model_from_bytes(b"garbage" * 4)


def test_predict_scores_restores_modes(small_backbone):
    m = Model(small_backbone, num_outputs=2, seed=0)
    m.set_stats_mode(UPDATE_STATS)
    before = [b.copy() for b in m.buffers_dict().values()]
    s = m.predict_scores(np.random.default_rng(0).normal(size=(10, 12)))
    assert s.shape == (10, 2) and np.all((s > 0) & (s < 1))
    assert all(bn.stats_mode == UPDATE_STATS for _, bn in m.batchnorms())
    assert all(np.array_equal(a, b) for a, b in zip(before, m.buffers_dict().values()))


def test_bias_before_batch_stats_has_zero_gradient():
    block = ResidualBlock(3, ResidualBlockSpec(4, PROJECTION), RngStream(1))
    for _, bn in block.batchnorms():
        bn.stats_mode = UPDATE_STATS
    for _, t in block.named_parameters():
        t.requires_grad = True
    with Tape() as tape:
        x = Tensor(np.random.default_rng(3).normal(size=(5, 3)))
        tape.backward(mean(block(x) * Tensor(np.random.default_rng(4).normal(size=(5, 4)))))
    assert np.max(np.abs(block.fc1.bias.grad)) < 1e-14
    assert np.max(np.abs(block.fc1.weight.grad)) > 1e-3
