import math

import numpy as np
import pytest

from zsalign.data import Fold, SyntheticWorldConfig, gen_synthetic_world
from zsalign.losses import LossConfig
from zsalign.mla import MlaModel
from zsalign.trainer import (InsufficientNegativesError, TrainConfig, TrainingError, lr_at,
                             sample_negatives, train, write_report)


def test_lr_schedule_points():
    cfg = TrainConfig(epochs=100, warmup_epochs=15, lr_max=1e-5)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(15, cfg) == 1e-5
    assert lr_at(7.5, cfg) == pytest.approx(5e-6)
    last = lr_at(99, cfg)
    assert last == pytest.approx(1e-5 * 0.5 * (1 + math.cos(math.pi * 84 / 85)), rel=1e-12)
    assert last < 1e-8


def test_lr_without_warmup():
    cfg = TrainConfig(epochs=10, warmup_epochs=0, lr_max=1.0)
    assert lr_at(0, cfg) == 1.0


def test_config_validation_and_n_ep_default():
    assert TrainConfig(warmup_epochs=7).n_ep == 7
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, warmup_epochs=11)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_ainv_boundary():
    cfg = TrainConfig(a_inv=True, warmup_epochs=15)
    assert cfg.inverted_at(0) and cfg.inverted_at(14)
    assert not cfg.inverted_at(15)
    assert not TrainConfig(a_inv=False).inverted_at(0)


def test_config_json_roundtrip():
    cfg = TrainConfig(epochs=5, warmup_epochs=2, loss=LossConfig("jsd", 3, 0.5), seed=4)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_negatives_single_class_batch_errors(rng):
    with pytest.raises(InsufficientNegativesError, match="insufficient negative pool"):
        sample_negatives(np.zeros(4, dtype=int), "xsample", 1, rng)


def test_xsample_negatives_are_other_class(rng):
    labels = np.array([0, 0, 1, 1, 2, 2])
    neg = sample_negatives(labels, "xsample", 3, rng)
    for i, row in enumerate(neg):
        assert len(set(row)) == 3
        assert np.all(labels[row] != labels[i])


def test_ysample_draws_from_other_seen_classes(rng):
    labels = np.array([0, 5, 59])
    neg = sample_negatives(labels, "ysample", 59, rng, seen_classes=range(60))
    for i, row in enumerate(neg):
        assert sorted(row) == sorted(set(range(60)) - {labels[i]})
    with pytest.raises(InsufficientNegativesError):
        sample_negatives(labels, "ysample", 60, rng, seen_classes=range(60))


def _tiny():
    cfg = SyntheticWorldConfig(n_classes=6, n_unseen=2, D=6, C_e=8, N_d=4, samples_per_class=8, seed=1)
    data, codebook, _ = gen_synthetic_world(cfg)
    return data, codebook, Fold([0, 1, 2, 3], [4, 5])


@pytest.mark.parametrize("kind", ["xsample", "ysample", "softmax_ce", "jsd"])
def test_train_runs_every_loss(kind):
    data, codebook, fold = _tiny()
    model = MlaModel.build(6, 8, [1, 2], hidden=(8, 4), seed=0)
    tcfg = TrainConfig(epochs=3, batch_size=10, lr_max=1e-3, warmup_epochs=1,
                       loss=LossConfig(kind, n_neg=2))
    trained, report = train(model, data, codebook, fold, tcfg)
    assert len(report.epochs) == 3
    assert all(np.isfinite(report.losses))
    assert any(not np.array_equal(a, b) for a, b in zip(trained.params().values(),
                                                       model.params().values()))


def test_train_is_deterministic():
    data, codebook, fold = _tiny()
    tcfg = TrainConfig(epochs=3, batch_size=10, lr_max=1e-3, warmup_epochs=1,
                       loss=LossConfig(n_neg=2), seed=3)
    runs = [train(MlaModel.build(6, 8, [1, 2], hidden=(8, 4), seed=0), data, codebook, fold, tcfg)
            for _ in range(2)]
    assert runs[0][1].losses == runs[1][1].losses
    for name, arr in runs[0][0].params().items():
        np.testing.assert_array_equal(arr, runs[1][0].params()[name])


def test_train_reports_nonfinite_loss():
    data, codebook, fold = _tiny()
    model = MlaModel.build(6, 8, [1], hidden=(8, 4))
    model.branches[0].head.b3[...] = np.nan
    tcfg = TrainConfig(epochs=2, batch_size=10, warmup_epochs=0, loss=LossConfig(n_neg=2))
    with pytest.raises(TrainingError, match="epoch 0"):
        train(model, data, codebook, fold, tcfg)


def test_write_report_and_checkpoints(tmp_path):
    data, codebook, fold = _tiny()
    tcfg = TrainConfig(epochs=2, batch_size=10, warmup_epochs=1, loss=LossConfig(n_neg=2),
                       checkpoint_every_epoch=True)
    _, report = train(MlaModel.build(6, 8, [1], hidden=(8, 4)), data, codebook, fold, tcfg,
                      checkpoint_dir=tmp_path / "ckpt")
    write_report(report, tmp_path)
    assert (tmp_path / "train_report.json").exists()
    assert (tmp_path / "train_epochs.csv").read_text().count("\n") == 3
    assert (tmp_path / "ckpt" / "manifest.json").exists()


def test_zero_lr_keeps_parameters_bit_exact():
    data, codebook, fold = _tiny()
    model = MlaModel.build(6, 8, [1, 2], hidden=(8, 4), seed=0)
    tcfg = TrainConfig(epochs=3, batch_size=10, lr_max=0.0, warmup_epochs=1, loss=LossConfig(n_neg=2))
    trained, _ = train(model, data, codebook, fold, tcfg)
    for name, arr in model.params().items():
        np.testing.assert_array_equal(trained.params()[name], arr)


def test_training_does_not_mutate_input_model():
    data, codebook, fold = _tiny()
    model = MlaModel.build(6, 8, [1], hidden=(8, 4), seed=0)
    snapshot = {k: v.copy() for k, v in model.params().items()}
    train(model, data, codebook, fold, TrainConfig(epochs=2, batch_size=10, lr_max=1e-2,
                                                   warmup_epochs=0, loss=LossConfig(n_neg=2)))
    for name, arr in model.params().items():
        np.testing.assert_array_equal(arr, snapshot[name])


def test_loss_trend_after_warmup_on_separable_world():
    cfg = SyntheticWorldConfig(n_classes=10, n_unseen=2, N_d=20, seed=0)
    data, codebook, _ = gen_synthetic_world(cfg)
    fold = Fold(list(range(8)), [8, 9])
    model = MlaModel.build(16, 32, [1, 5, 10], hidden=(64, 32), seed=0)
    tcfg = TrainConfig(epochs=60, lr_max=1e-3, warmup_epochs=15, loss=LossConfig(n_neg=8))
    _, report = train(model, data, codebook, fold, tcfg)
    losses = report.losses[15:]
    violations = sum(losses[i + 10] > losses[i] for i in range(len(losses) - 10))
    assert violations <= 1
