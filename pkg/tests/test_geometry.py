import numpy as np
import pytest

from oddstest.geometry import (NoCrossoverError, cone_grid, feature_ray_profile, logit_crossover, nn_distance_ratio,
                               nn_distance_ratios, orthogonal_draws, preimage_search, preimage_step, roc_auc,
                               roc_sweep, softmax_ray)
from oddstest.models import linear, mlp
from oddstest.noise import NoiseGrid, NoiseSpec
from oddstest.odds import OddsStatistics, ZScores


def ident(dim=3, k=2):
    w = np.zeros((k, dim))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    return linear(dim, k, weights=w)


def test_ray_at_zero():
    m = ident()
    p = feature_ray_profile(m, np.full(3, 0.5), np.array([0.1, -0.2, 0.3]), [0.0, 0.5])
    assert p.norm[0] == 0 and p.alignment[0] == 0


def test_ray_identity_norm():
    m = ident()
    u = np.array([0.3, -0.4, 0.0])
    p = feature_ray_profile(m, np.full(3, 0.2), u, [0.0, 0.5, 2.0])
    assert np.allclose(p.norm, p.t * np.linalg.norm(u), atol=1e-14)
    assert np.allclose(p.alignment, p.t * (-0.4 - 0.3))


def test_softmax_ray():
    m = ident()
    x = np.array([0.6, 0.2, 0.0])
    r = softmax_ray(m, x, np.array([-1.0, 1.0, 0.0]), np.linspace(0, 1, 11))
    assert np.allclose(r.probs.sum(axis=1), 1.0, atol=1e-9)
    e = np.exp([0.6, 0.2])
    assert np.allclose(r.probs[0], e / e.sum())


def test_orthogonal_draws():
    d = np.random.default_rng(0).normal(size=20)
    n = orthogonal_draws(d, 50, seed=1)
    cos = np.abs(n @ d) / (np.linalg.norm(n, axis=1) * np.linalg.norm(d))
    assert cos.max() < 1e-6
    assert np.allclose(np.linalg.norm(n, axis=1), np.linalg.norm(d))


def test_cone_zero_offset():
    m = ident()
    x = np.array([0.6, 0.2, 0.5])
    g = cone_grid(m, x, np.array([-0.1, 0.1, 0.0]), [-1.0, 0.0, 1.0], [0.0, 1.0], draws=4)
    e = np.exp([0.6, 0.2])
    assert g.values[0, 1] == pytest.approx(e[0] / e.sum())


def test_crossover_symmetric():
    m = ident(2)
    assert logit_crossover(m, np.array([0.7, 0.3]), np.array([0.3, 0.7])) == pytest.approx(0.5, abs=1e-4)


def test_crossover_scaling_halves():
    m = ident(2)
    x = np.array([0.55, 0.45])
    d = np.array([-0.1, 0.1])
    t1 = logit_crossover(m, x, x + d)
    t2 = logit_crossover(m, x, x + 2 * d)
    assert t2 == pytest.approx(t1 / 2, abs=1e-4)


def test_crossover_requires_flip():
    m = ident(2)
    with pytest.raises(NoCrossoverError):
        logit_crossover(m, np.array([0.7, 0.3]), np.array([0.6, 0.3]))


def test_nn_ratio():
    x_nat = np.zeros(2)
    x_adv = np.array([1.0, 0.0])
    corpus = np.array([[11.0, 0.0], [1.0, 10.0]])
    assert nn_distance_ratio(x_adv, x_nat, corpus) == pytest.approx(0.1)
    assert nn_distance_ratios(x_adv[None], x_nat[None], corpus)[0] == pytest.approx(0.1)
    with pytest.raises(ZeroDivisionError, match="zero nn-distance"):
        nn_distance_ratio(x_adv, x_nat, np.vstack([corpus, x_adv]))


def test_preimage_identity():
    m = ident()
    x = np.array([0.2, 0.4, 0.6])
    dphi = np.array([0.3, -0.1, 0.2, 0.0])
    for step in [0.25, 0.5, 1.0]:
        xp, imp = preimage_step(m, x, dphi, step)
        assert np.allclose(xp, x + step * dphi[:3])
        assert imp == pytest.approx(step * np.linalg.norm(dphi))
    assert preimage_step(m, x, dphi, 0.0)[1] == 0.0
    _, imp, step = preimage_search(m, x, dphi)
    assert step == pytest.approx(1.0) and imp == pytest.approx(np.linalg.norm(dphi))


def test_preimage_zero_gradient_warns():
    m = mlp(2, [3], 2, seed=0)
    # every hidden unit is dead on the unit square, so the Jacobian vanishes
    m = m.replace({**m.params, "W1": np.zeros((2, 3)), "b1": -np.ones(3)})
    with pytest.warns(UserWarning):
        _, imp = preimage_step(m, np.full(2, 0.5), np.array([1.0, 0.0, 0.0, 0.0]), 0.5)
    assert imp == 0.0


def roc_fixture():
    grid = NoiseGrid((NoiseSpec("gaussian", 0.1, 4),), 2)
    stats = OddsStatistics(np.zeros((1, 2, 2)), np.ones((1, 2, 2)), np.full(2, 10), grid, "x")
    rng = np.random.default_rng(0)
    c = np.zeros((300, 1, 2))
    c[:, 0, 1] = rng.normal(0, 1, 300)
    a = np.zeros((200, 1, 2))
    a[:, 0, 1] = rng.normal(2.5, 1, 200)
    clean = ZScores(np.arange(300), np.zeros(300, dtype=int), c)
    adv = ZScores(np.arange(200), np.zeros(200, dtype=int), a)
    return stats, clean, adv


def test_roc_boundaries():
    stats, clean, adv = roc_fixture()
    rows = roc_sweep(stats, clean, adv, np.zeros(300, dtype=int), np.ones(200, dtype=int), [0.0, 0.05, 1.0])
    assert rows[0][0] == 0.0
    assert rows[0][1] == pytest.approx(np.mean(adv.cells[:, 0, 1] > clean.cells[:, 0, 1].max()))
    assert rows[-1][:2] == (1.0, 1.0)
    assert rows[1][0] <= 0.05
    assert 0.5 < roc_auc(rows) <= 1.0


def test_blob_geometry(blob):
    m, x, xa = blob.model, blob.xte[:100], blob.xte_adv[:100]
    y0 = m.predict(x)
    ok = np.flatnonzero((m.predict(xa) != y0) & (y0 == blob.yte[:100]))
    rng = np.random.default_rng(0)
    wins, drops = 0, 0
    for i in ok:
        d = xa[i] - x[i]
        r = rng.standard_normal(20)
        r *= np.linalg.norm(d) / np.linalg.norm(r)
        adv = feature_ray_profile(m, x[i], d, [0.0, 1.0])
        rnd = feature_ray_profile(m, x[i], r, [0.0, 1.0])
        wins += adv.alignment[1] > rnd.alignment[1]
        p = softmax_ray(m, x[i], d, [0.0, 1.0]).probs
        drops += p[1, y0[i]] < p[0, y0[i]]
    assert wins >= 0.9 * len(ok)
    assert drops == len(ok)
