import math

import numpy as np
import pytest

from bnfair.core import RngStream, Tensor, check_gradients
from bnfair.data import DatasetSpec, generate_dataset
from bnfair.nn import BackboneSpec, Model, checkpoint_bytes
from bnfair.pretrain import (AugmentConfig, PretrainConfig, augment, nt_xent, nt_xent_per_anchor,
                             pretrain)


def test_identity_augmentation():
    x = np.random.default_rng(0).normal(size=(5, 7))
    y = augment(x, AugmentConfig(noise_std=0.0, mask_prob=0.0, scale_low=1.0, scale_high=1.0),
                RngStream(1))
    assert np.array_equal(x, y)


def test_full_mask_leaves_noise_only():
    x = np.random.default_rng(0).normal(size=(4, 6)) + 10
    cfg = AugmentConfig(noise_std=0.5, mask_prob=1.0)
    rng = RngStream(2)
    y = augment(x, cfg, rng)
    ref = RngStream(2)
    ref.uniform((4, 6))
    ref.uniform(4)
    assert np.array_equal(y, 0.5 * ref.normal((4, 6)))


def test_augment_deterministic():
    x = np.random.default_rng(0).normal(size=(3, 4))
    cfg = AugmentConfig()
    assert np.array_equal(augment(x, cfg, RngStream(9)), augment(x, cfg, RngStream(9)))
    assert augment(x[0], cfg, RngStream(9)).shape == (4,)


def test_single_pair_has_zero_loss():
    z = Tensor(np.random.default_rng(1).normal(size=(2, 5)))
    assert nt_xent(z).item() == 0.0


def test_identical_embeddings_closed_form():
    z = Tensor(np.tile([[0.3, -1.0, 2.0]], (4, 1)))
    assert nt_xent(z).item() == pytest.approx(math.log(3), abs=1e-12)


def test_nt_xent_gradcheck():
    z = np.random.default_rng(2).normal(size=(4, 8))
    assert check_gradients(lambda t: nt_xent(t, 0.5), [z]) <= 1e-6


def test_nt_xent_properties():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        z = rng.normal(size=(2 * n, 4))
        loss = nt_xent(Tensor(z)).item()
        assert loss >= 0
        assert nt_xent(Tensor(z * rng.uniform(0.1, 10))).item() == pytest.approx(loss, rel=1e-12)
        per = nt_xent_per_anchor(z)
        assert per.mean() == pytest.approx(loss, rel=1e-12)
        pairs = rng.permutation(n)
        order = np.ravel(np.stack([2 * pairs, 2 * pairs + 1], axis=1))
        np.testing.assert_allclose(nt_xent_per_anchor(z[order]), per[order], rtol=1e-12)


def test_nt_xent_rejects_odd_batch():
    with pytest.raises(ValueError):
        nt_xent(Tensor(np.ones((3, 2))))


def _tiny():
    spec = DatasetSpec(n_train=256, n_test=8, feature_dim=8, latent_dim=4,
                       marginals=[0.3, 0.5], names=["a", "b"], seed=1)
    backbone = BackboneSpec(input_dim=8, width=8, embedding_dim=8,
                            blocks=[{"width": 8, "skip_kind": "Projection"}])
    return generate_dataset(spec)[0], backbone


def test_zero_epochs_is_identity():
    train, backbone = _tiny()
    m = Model(backbone, seed=4)
    before = checkpoint_bytes(m)
    log = pretrain(train.features, m, PretrainConfig(epochs=0, batch_size=64), RngStream(0))
    assert log["epoch_losses"] == [] and log["steps"] == 0
    assert checkpoint_bytes(m) == before


def test_pretrain_deterministic():
    train, backbone = _tiny()
    blobs = []
    for _ in range(2):
        m = Model(backbone, seed=4)
        pretrain(train.features, m, PretrainConfig(epochs=2, batch_size=64, proj_dim=4),
                 RngStream(11))
        blobs.append(checkpoint_bytes(m))
    assert blobs[0] == blobs[1]


@pytest.mark.slow
def test_default_pretraining_reduces_loss():
    train, _ = generate_dataset(DatasetSpec())
    m = Model(BackboneSpec(), seed=0)
    losses = pretrain(train.features, m, PretrainConfig(), RngStream(0))["epoch_losses"]
    assert len(losses) == 10
    assert losses[-1] < losses[0]
    windows = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(windows) < 0)


def test_dead_projection_row_is_finite():
    z = np.random.default_rng(4).normal(size=(4, 3))
    z[1] = 0.0
    loss = nt_xent(Tensor(z)).item()
    assert math.isfinite(loss)
    assert check_gradients(lambda t: nt_xent(t), [z[[0, 2, 3, 0]]]) <= 1e-6
