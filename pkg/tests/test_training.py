import math

import numpy as np
import pytest

from conftest import numeric_grad
from crnn_mer.dataset import make_synthetic
from crnn_mer.evaluation import evaluate_songs
from crnn_mer.layers import ConfigError
from crnn_mer.model import CRNN, ModelSpec
from crnn_mer.numerics import Rng
from crnn_mer.training import (Adam, NumericalError, TrainConfig, adam_step, elasticnet_penalty,
                               rmse_loss, train)


def test_rmse_loss_zero():
    p = Rng(0).uniform(-1, 1, (2, 3, 2))
    loss, grad = rmse_loss(p, p.copy(), np.ones((2, 3)))
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_rmse_loss_analytic():
    loss, _ = rmse_loss(np.array([[[1.0, 1.0]]]), np.array([[[-1.0, -1.0]]]), np.ones((1, 1)))
    assert loss == 2.0


def test_rmse_loss_grad_fd(rng):
    pred, target = rng.uniform(-1, 1, (3, 4, 2)), rng.uniform(-1, 1, (3, 4, 2))
    mask = np.ones((3, 4))
    mask[2, 3] = mask[1, 0] = 0
    _, grad = rmse_loss(pred, target, mask)
    fd = numeric_grad(lambda: rmse_loss(pred, target, mask)[0], pred)
    np.testing.assert_allclose(grad, fd, rtol=0, atol=1e-6)
    assert np.all(grad[2, 3] == 0) and np.all(grad[1, 0] == 0)


def test_rmse_loss_mask_excludes(rng):
    pred, target = rng.uniform(-1, 1, (1, 5, 2)), rng.uniform(-1, 1, (1, 5, 2))
    mask = np.array([[1, 1, 1, 0, 0]], dtype=float)
    garbage = pred.copy()
    garbage[0, 3:] = 99.0
    assert rmse_loss(garbage, target, mask)[0] == rmse_loss(pred[:, :3], target[:, :3])[0]


def test_rmse_loss_all_masked():
    with pytest.raises(ValueError):
        rmse_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2)))


def test_elasticnet_zero_coefficients(rng):
    pen, dk, da = elasticnet_penalty(rng.uniform(-1, 1, (3, 3, 1, 2)), rng.uniform(-1, 1, (2, 3, 4, 2)), 0, 0)
    assert pen == 0.0 and not dk.any() and not da.any()


def test_elasticnet_single_weight():
    pen, dk, _ = elasticnet_penalty(np.array([2.0]), np.zeros((1, 3)), 0.1, 0.001)
    assert pen == pytest.approx(0.204, abs=1e-15)
    assert dk[0] == pytest.approx(0.1 + 0.004)


def test_elasticnet_kink_and_fd(rng):
    k = np.array([0.0, 0.5, -0.7])
    _, dk, _ = elasticnet_penalty(k, None, 0.1, 0.001)
    assert dk[0] == 0.0
    k = rng.uniform(0.1, 1, (3, 3)) * np.sign(rng.uniform(-1, 1, (3, 3)))
    a = rng.uniform(0.1, 1, (4, 2, 3)) * np.sign(rng.uniform(-1, 1, (4, 2, 3)))
    _, dk, da = elasticnet_penalty(k, a, 0.1, 0.001)
    np.testing.assert_allclose(dk, numeric_grad(lambda: elasticnet_penalty(k, a, 0.1, 0.001)[0], k), atol=1e-6)
    np.testing.assert_allclose(da, numeric_grad(lambda: elasticnet_penalty(k, a, 0.1, 0.001)[0], a), atol=1e-6)


def test_elasticnet_activity_scaled_by_batch():
    a = np.ones((4, 5))
    p4, _, _ = elasticnet_penalty(np.zeros(1), a, 0.1, 0.0)
    p8, _, _ = elasticnet_penalty(np.zeros(1), np.ones((8, 5)), 0.1, 0.0)
    assert p4 == pytest.approx(0.5) and p8 == pytest.approx(0.5)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam()
    adam_step(p, {"w": np.zeros(2)}, opt)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert opt.t == 1


def test_adam_first_step_is_lr():
    p = {"w": np.zeros(4)}
    g = np.array([0.5, -3.0, 1e-2, 100.0])
    adam_step(p, {"w": g}, Adam(lr=1e-3))
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g) * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(np.abs(p["w"]), 1e-3, rtol=1e-5)


def test_adam_two_steps_scalar():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    w, m, v = 0.3, 0.0, 0.0
    g_seq = [0.7, -0.2]
    for t, g in enumerate(g_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"w": np.array([0.3])}
    cfg = TrainConfig(learning_rate=lr)
    opt = Adam()
    for g in g_seq:
        adam_step(p, {"w": np.array([g])}, opt, cfg)
    assert abs(p["w"][0] - w) < 1e-12


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(seq_len=0)
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.l1, cfg.l2, cfg.dropout) == (32, 1e-3, 0.1, 0.001, 0.25)


def small_setup(seed=0, dropout=0.0):
    data = make_synthetic(Rng(5), 6, 20, 4, "echo")
    model = CRNN(ModelSpec(4, cnn_filters=2, fc_units=4, gru_units=4, dropout_rate=dropout), Rng(seed))
    return data, model


def test_lr_zero_keeps_params():
    data, model = small_setup()
    before = {k: v.copy() for k, v in model.params.items()}
    model, _ = train(model, data, TrainConfig(seq_len=5, learning_rate=0.0, max_epochs=3, patience=5, dropout=0.25))
    for k, v in before.items():
        assert model.params[k].tobytes() == v.tobytes()


def test_train_deterministic():
    reports, states = [], []
    for _ in range(2):
        data, model = small_setup(dropout=0.25)
        model, rep = train(model, data, TrainConfig(seq_len=5, max_epochs=4, patience=10, dropout=0.25, seed=3))
        reports.append(rep)
        states.append(b"".join(v.tobytes() for v in model.state().values()))
    assert reports[0] == reports[1]
    assert states[0] == states[1]


def test_train_loss_decreases_first_epochs():
    data = make_synthetic(Rng(7), 8, 60, 16, "smooth")
    model = CRNN(ModelSpec(16, dropout_rate=0.0), Rng(0))
    _, rep = train(model, data, TrainConfig(seq_len=10, dropout=0.0, l1=0, l2=0, max_epochs=4,
                                            patience=10, val_fraction=0))
    losses = [r.train_loss for r in rep.epochs]
    assert all(b < a for a, b in zip(losses[:4], losses[1:4]))


def test_early_stopping_returns_best():
    data, model = small_setup()
    val = make_synthetic(Rng(99), 2, 20, 4, "smooth")
    cfg = TrainConfig(seq_len=5, max_epochs=40, patience=3, dropout=0.0, learning_rate=0.05)
    model, rep = train(model, data, cfg, val_pairs=val)
    best = min(rep.epochs, key=lambda r: r.val_average)
    assert rep.best_epoch == best.epoch
    assert rep.stopped_epoch == len(rep.epochs)
    if rep.stopped_epoch < cfg.max_epochs:
        assert rep.stopped_epoch - rep.best_epoch == cfg.patience
    res = evaluate_songs(model, val, cfg.seq_len)
    assert res.rmse_valence == best.val_rmse_valence
    assert res.rmse_arousal == best.val_rmse_arousal


def test_nan_loss_aborts():
    data, model = small_setup()
    model.params["valence/fc/W"][0, 0] = np.nan
    with pytest.raises(NumericalError):
        train(model, data, TrainConfig(seq_len=5, max_epochs=2, dropout=0.0))


def test_report_csv(tmp_path):
    data, model = small_setup()
    _, rep = train(model, data, TrainConfig(seq_len=5, max_epochs=3, dropout=0.0))
    rep.write_csv(tmp_path / "r.csv", header_comment="cfg")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# cfg"
    assert lines[1] == "epoch,train_loss,val_rmse_valence,val_rmse_arousal"
    assert len(lines) == 2 + len(rep.epochs)
    assert float(lines[2].split(",")[1]) == rep.epochs[0].train_loss


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(small_setup()[1], [], TrainConfig())
