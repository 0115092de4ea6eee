from __future__ import annotations

import numpy as np
import pytest

from oracles import barlow_twins_oracle
from ssdistill.core import tensor as T
from ssdistill.core.gradcheck import finite_diff_check
from ssdistill.core.rng import RngState
from ssdistill.errors import ConfigError, ContractError, DimensionError
from ssdistill.models import ConvNetConfig
from ssdistill.ssl import (
    AugmentConfig,
    TargetModel,
    TargetTrainerConfig,
    augment_batch,
    augment_two_views,
    barlow_twins_loss,
    denormalize_rows,
    normalize_rows,
    train_target,
)

SHAPE = (3, 8, 8)


def raw_images(seed, n, shape=SHAPE):
    c, h, w = shape
    return RngState(seed).uniform((n, c * h * w))


def test_normalize_round_trip():
    X = raw_images(1, 10)
    mean, std = [0.4, 0.5, 0.6], [0.2, 0.25, 0.3]
    Xn = normalize_rows(X, mean, std, SHAPE)
    back = denormalize_rows(Xn, mean, std, SHAPE)
    assert np.allclose(back, X, atol=1e-12)
    # channel semantics: constant image normalizes to (v - mean)/std per channel
    row = np.concatenate([np.full(64, 0.8), np.full(64, 0.5), np.full(64, 0.6)])[None]
    out = normalize_rows(row, mean, std, SHAPE)
    assert np.allclose(out[0, :64], (0.8 - 0.4) / 0.2)
    assert np.allclose(out[0, 64:128], 0.0)


def test_normalize_rejects_bad_std():
    with pytest.raises(ContractError):
        normalize_rows(raw_images(2, 3), [0.5] * 3, [0.0, 1.0, 1.0], SHAPE)


def test_augment_shapes_range_determinism():
    X = raw_images(3, 20)
    cfg = AugmentConfig()
    a1 = augment_batch(RngState(7), X, SHAPE, cfg)
    a2 = augment_batch(RngState(7), X, SHAPE, cfg)
    assert a1.shape == X.shape
    assert np.array_equal(a1, a2)
    assert a1.min() >= 0.0 and a1.max() <= 1.0


def test_augment_views_differ():
    X = raw_images(4, 16)
    va, vb = augment_two_views(RngState(8), X, SHAPE, AugmentConfig())
    assert not np.array_equal(va, vb)
    assert not np.array_equal(va, X)


def test_augment_identity_when_disabled():
    X = raw_images(5, 6)
    cfg = AugmentConfig(pad=0, flip_prob=0.0, brightness=0.0, contrast=0.0)
    assert np.array_equal(augment_batch(RngState(9), X, SHAPE, cfg), X)


def test_augment_flip_only_reverses_width():
    X = raw_images(6, 4)
    cfg = AugmentConfig(pad=0, flip_prob=1.0, brightness=0.0, contrast=0.0)
    out = augment_batch(RngState(10), X, SHAPE, cfg)
    c, h, w = SHAPE
    assert np.array_equal(out.reshape(4, c, h, w), X.reshape(4, c, h, w)[:, :, :, ::-1])


def test_loss_matches_double_loop_oracle():
    za = RngState(11).normal((16, 6))
    zb = za + 0.3 * RngState(12).normal((16, 6))
    lam = 5e-3
    got = barlow_twins_loss(T.leaf(za), T.leaf(zb), lam).item()
    want = barlow_twins_oracle(za, zb, lam)
    assert got == pytest.approx(want, rel=1e-10)


def test_loss_zero_for_perfectly_decorrelated_views():
    # identical views with exactly orthogonal standardized columns: diag = 1
    za = RngState(13).normal((64, 4))
    got_same = barlow_twins_loss(T.leaf(za), T.leaf(za), 1.0).item()
    # identical views make the diagonal exactly 1, so only off-diag remains
    a = (za - za.mean(0)) / np.sqrt(za.var(0) + 1e-12)
    off = ((a.T @ a / 64) ** 2 * (1 - np.eye(4))).sum()
    assert got_same == pytest.approx(off, rel=1e-9)


def test_loss_penalizes_redundancy():
    z = RngState(14).normal((32, 1))
    dup = np.concatenate([z, z], axis=1)  # two identical dims: off-diag corr 1
    indep = RngState(15).normal((32, 2))
    l_dup = barlow_twins_loss(T.leaf(dup), T.leaf(dup), 1.0).item()
    l_ind = barlow_twins_loss(T.leaf(indep), T.leaf(indep), 1.0).item()
    assert l_dup > l_ind


def test_loss_gradcheck():
    za0 = RngState(16).normal((10, 4))
    zb0 = RngState(17).normal((10, 4))

    def f(v):
        return barlow_twins_loss(v, T.constant(zb0), 5e-3)

    assert finite_diff_check(f, za0, h=1e-5) < 1e-6


def test_loss_contracts():
    with pytest.raises(ContractError):
        barlow_twins_loss(T.leaf(np.ones((1, 4))), T.leaf(np.ones((1, 4))), 1.0)
    with pytest.raises(DimensionError):
        barlow_twins_loss(T.leaf(np.ones((4, 3))), T.leaf(np.ones((4, 2))), 1.0)


def tiny_trainer(epochs=3):
    return TargetTrainerConfig(
        epochs=epochs,
        batch_size=16,
        lr=0.02,
        projector_hidden=(16,),
        embed_dim=8,
        augment=AugmentConfig(pad=1, brightness=0.1, contrast=0.1),
    )


def tiny_backbone():
    return ConvNetConfig(depth=2, width=8, in_shape=SHAPE)


def test_train_target_reduces_loss_and_freezes():
    X = raw_images(18, 64)
    model, trace = train_target(RngState(19), X, [0.5] * 3, [0.3] * 3, tiny_backbone(), tiny_trainer(8))
    assert len(trace) == 8
    assert trace[-1]["loss"] < trace[0]["loss"]
    assert model.backbone.frozen and model.projector.frozen
    with pytest.raises(ContractError):
        model.backbone.forward(np.zeros((4, model.backbone.in_dim)), mode="train")


def test_embed_batch_size_invariance():
    X = raw_images(20, 40)
    model, _ = train_target(RngState(21), X, [0.5] * 3, [0.3] * 3, tiny_backbone(), tiny_trainer(2))
    e1 = model.embed(X, batch_size=7)
    e2 = model.embed(X, batch_size=40)
    assert e1.shape == (40, model.embed_dim)
    assert np.allclose(e1, e2, atol=1e-12)


def test_embed_modes_change_dimension():
    X = raw_images(22, 32)
    cfg = tiny_trainer(2)
    model, _ = train_target(RngState(23), X, [0.5] * 3, [0.3] * 3, tiny_backbone(), cfg)
    assert model.embed_dim == tiny_backbone().feature_dim
    proj_model = TargetModel(model.backbone, model.projector, "projector_output", model.mean, model.std)
    assert proj_model.embed_dim == cfg.embed_dim
    assert proj_model.embed(X[:4]).shape == (4, cfg.embed_dim)


def test_target_model_save_load_round_trip(tmp_path):
    X = raw_images(24, 32)
    model, _ = train_target(RngState(25), X, [0.5] * 3, [0.3] * 3, tiny_backbone(), tiny_trainer(2))
    model.save(tmp_path / "target")
    back = TargetModel.load(tmp_path / "target")
    assert np.array_equal(back.embed(X[:8]), model.embed(X[:8]))
    assert back.embed_mode == model.embed_mode
    assert back.backbone.frozen


def test_trainer_config_validation():
    with pytest.raises(ConfigError):
        TargetTrainerConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        TargetTrainerConfig(embed_mode="cls_token").validate()
    with pytest.raises(ConfigError):
        TargetTrainerConfig(augment=AugmentConfig(pad=-1)).validate()


def test_training_is_deterministic():
    X = raw_images(26, 32)
    m1, t1 = train_target(RngState(27), X, [0.5] * 3, [0.3] * 3, tiny_backbone(), tiny_trainer(2))
    m2, t2 = train_target(RngState(27), X, [0.5] * 3, [0.3] * 3, tiny_backbone(), tiny_trainer(2))
    assert t1 == t2
    for k in m1.backbone.params:
        assert np.array_equal(m1.backbone.params[k], m2.backbone.params[k])
