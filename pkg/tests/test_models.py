import numpy as np
import pytest

from oddstest.attacks import AttackSpec, pgd_attack
from oddstest.data import gen_blobs
from oddstest.models import (Classifier, TrainConfig, TrainingError, features, linear, log_odds, logits, mlp,
                             predict, tiny_cnn, train)


def test_linear_model_logits():
    m = linear(2, 2, weights=[[1, 0], [0, 1]])
    assert np.allclose(logits(m, np.array([3.0, 5.0])), [3, 5])
    assert predict(m, np.array([3.0, 5.0])) == 1
    assert np.allclose(features(m, np.array([3.0, 5.0]))[:2], [3, 5])


def test_tie_goes_to_lowest_index():
    m = linear(2, 3, weights=np.zeros((3, 2)))
    assert predict(m, np.array([0.3, 0.4])) == 0


def test_log_odds_antisymmetric():
    m = linear(2, 2, weights=[[1, 0], [0, 1]])
    x = np.array([1.0, 4.0])
    assert log_odds(m, x, 0, 1) == 3 and log_odds(m, x, 1, 0) == -3 and log_odds(m, x, 1, 1) == 0
    with pytest.raises(IndexError):
        log_odds(m, x, 0, 2)


def test_random_model_features_finite():
    m = mlp(20, [16, 8], 4, seed=3)
    phi = features(m, np.random.default_rng(0).random(20))
    assert phi.shape == (9,) and np.all(np.isfinite(phi)) and phi[-1] == 1.0


def test_linearity_identity_random_mlp():
    m = mlp(20, [32, 32], 4, seed=1)
    x = np.random.default_rng(1).random((50, 20))
    f = m.logits(x)
    assert np.allclose(f, m.features(x) @ m.logit_weights.T, atol=1e-12)


def test_predict_invariant_to_common_shift():
    m = mlp(5, [8], 3, seed=2)
    w = m.params["W_out"].copy()
    w[-1] += 7.5
    shifted = m.replace({**m.params, "W_out": w})
    x = np.random.default_rng(2).random((40, 5))
    assert np.array_equal(m.predict(x), shifted.predict(x))


def test_wrong_shape():
    m = mlp(5, [8], 3)
    with pytest.raises(ValueError):
        m.logits(np.zeros(4))


def test_logits_match_independent_arithmetic(blob):
    m, x = blob.model, blob.xte[:10]
    p = m.params
    h = np.maximum(x @ p["W1"] + p["b1"], 0)
    h = np.maximum(h @ p["W2"] + p["b2"], 0)
    ref = h @ p["W_out"][:-1] + p["W_out"][-1]
    assert np.allclose(m.logits(x), ref, atol=1e-10)


def test_blob_accuracy_and_negative_log_odds(blob):
    m = blob.model
    pred = m.predict(blob.xte)
    assert np.mean(pred == blob.yte) >= 0.95
    f = m.logits(blob.xte)
    ok = pred == blob.yte
    other = f[ok] - f[ok, pred[ok]][:, None]
    other[np.arange(ok.sum()), pred[ok]] = -1
    assert np.all(other < 0)


def test_two_blob_training():
    ds = gen_blobs(2, 2, 400, separation=4.0, seed=4, background_std=0.1)
    x, y, _ = ds.split("train")
    xt, yt, _ = ds.split("test")
    m = train(mlp(2, [16], 2, seed=0), x, y, TrainConfig(epochs=60, seed=0))
    assert np.mean(m.predict(xt) == yt) >= 0.99


def test_zero_epochs_returns_same_model():
    m = mlp(3, [4], 2, seed=0)
    out = train(m, np.random.default_rng(0).random((10, 3)), np.arange(10) % 2, TrainConfig(epochs=0))
    assert out.checksum() == m.checksum()


def test_training_is_reproducible():
    x = np.random.default_rng(0).random((64, 3))
    y = (x[:, 0] > 0.5).astype(int)
    a = train(mlp(3, [8], 2, seed=1), x, y, TrainConfig(epochs=3, seed=5))
    b = train(mlp(3, [8], 2, seed=1), x, y, TrainConfig(epochs=3, seed=5))
    assert a.checksum() == b.checksum()


def test_nan_loss_aborts():
    x = np.random.default_rng(0).random((16, 3))
    x[3, 1] = np.nan
    with pytest.raises(TrainingError):
        train(mlp(3, [8], 2), x, np.arange(16) % 2, TrainConfig(epochs=2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="adam")


def test_adversarial_mix_trades_clean_for_robust_accuracy(blob):
    spec = AttackSpec("pgd", "linf", blob.eps, iterations=7, seed=9)
    robust = train(mlp(20, [128, 128], 4, seed=0), blob.xtr, blob.ytr,
                   TrainConfig(epochs=100, seed=0, adversarial=spec))
    eval_spec = AttackSpec("pgd", "linf", blob.eps, seed=1)
    x, y = blob.xte[:400], blob.yte[:400]
    xr = pgd_attack(robust, x, eval_spec)
    clean_std = np.mean(blob.model.predict(x) == y)
    clean_rob = np.mean(robust.predict(x) == y)
    pgd_std = np.mean(blob.model.predict(blob.xte_adv[:400]) == y)
    pgd_rob = np.mean(robust.predict(xr) == y)
    assert pgd_rob > pgd_std
    assert clean_rob <= clean_std


def test_tiny_cnn_runs():
    m = tiny_cnn((1, 8, 8), 3, channels=(4, 4), seed=0)
    x = np.random.default_rng(0).random((5, 64))
    assert m.logits(x).shape == (5, 3)
    assert np.allclose(m.logits(x), m.features(x) @ m.logit_weights.T)
    g = m.loss_grad(x, np.array([0, 1, 2, 0, 1]))[1]
    assert g.shape == (5, 64)
