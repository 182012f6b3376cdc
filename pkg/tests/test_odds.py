import numpy as np
import pytest

from oddstest.models import linear, mlp
from oddstest.noise import NoiseGrid, NoiseSpec, default_grid, noise_block
from oddstest.odds import (DegenerateStatisticsError, EmptyClassError, OddsStatistics, StatsMismatchError, ZScores,
                           calibrate_thresholds, correct, detect, fit_statistics, perturbed_log_odds,
                           thresholds_at_level, votes, z_scores)


def test_perturbed_log_odds_trivial_cases():
    m = mlp(4, [8], 3, seed=0)
    x = np.full(4, 0.5)
    assert perturbed_log_odds(m, x, 0, 2, np.zeros(4)) == 0
    assert perturbed_log_odds(m, x, 1, 1, np.full(4, 0.1)) == 0


def test_perturbed_log_odds_identity_model():
    # w_z - w_y = [1, -1]
    m = linear(2, 2, weights=[[0, 1], [1, 0]])
    assert perturbed_log_odds(m, np.array([0.4, 0.5]), 0, 1, np.array([0.1, 0.2])) == pytest.approx(-0.1)


def test_perturbed_log_odds_clips():
    m = linear(2, 2, weights=[[0, 0], [1, 0]])
    assert perturbed_log_odds(m, np.array([0.95, 0.5]), 0, 1, np.array([0.2, 0.0])) == pytest.approx(0.05)


def small_grid(dim, base=0.1, samples=16):
    return default_grid(dim, base, samples=samples, levels=2)


def test_constant_features_degenerate():
    m = linear(3, 3, weights=np.zeros((3, 3)))
    x = np.random.default_rng(0).random((30, 3))
    with pytest.raises(DegenerateStatisticsError) as err:
        fit_statistics(m, x, np.zeros(30, dtype=int), small_grid(3), min_count=1)
    assert np.all(err.value.mu == 0)


def test_empty_class():
    m = linear(2, 2, weights=[[1, 0], [0, 1]])
    x = np.array([[0.9, 0.1]] * 12) + np.random.default_rng(0).normal(0, 0.01, (12, 2))
    with pytest.raises(EmptyClassError) as err:
        fit_statistics(m, x, np.zeros(12, dtype=int), small_grid(2))
    assert err.value.classes == [1]


@pytest.fixture(scope="module")
def fitted(blob):
    grid = default_grid(20, blob.eps, samples=32, levels=2)
    stats = fit_statistics(blob.model, blob.xtr, blob.ytr, grid)
    return grid, stats


def test_duplicated_points_same_statistics(blob, fitted):
    grid, stats = fitted
    dup = fit_statistics(blob.model, np.concatenate([blob.xtr, blob.xtr]), np.concatenate([blob.ytr, blob.ytr]), grid)
    assert np.allclose(dup.mu, stats.mu, atol=1e-12)
    assert np.allclose(dup.sigma, stats.sigma, atol=1e-12)


def test_mu_two_pass_oracle(blob, fitted):
    grid, stats = fitted
    m, y, z, cell = blob.model, 1, 2, 3
    eta = noise_block(grid.specs[cell], 20)
    pts = blob.xtr[(m.predict(blob.xtr) == blob.ytr) & (blob.ytr == y)]
    vals = []
    for x in pts:
        f0 = m.logits(x)
        for e in eta:
            f = m.logits(np.clip(x + e, 0, 1))
            vals.append((f[z] - f[y]) - (f0[z] - f0[y]))
    vals = np.array(vals)
    mean = sum(vals.tolist()) / len(vals)
    var = sum(((vals - mean) ** 2).tolist()) / len(vals)
    assert abs(stats.mu[cell, y, z] - mean) < 1e-9
    assert abs(stats.sigma[cell, y, z] - np.sqrt(var)) < 1e-9
    assert stats.pair_counts[y, z] == len(vals)


def test_zscores_shape_and_diagonal(blob, fitted):
    _, stats = fitted
    s = z_scores(blob.model, blob.xte[:20], stats)
    assert s.cells.shape == (20, 6, 4)
    assert np.all(s.cells[np.arange(20), :, s.pred] == 0)


def test_zscores_order_independent(blob, fitted):
    _, stats = fitted
    x = blob.xte[:30]
    perm = np.random.default_rng(0).permutation(30)
    a = z_scores(blob.model, x, stats)
    b = z_scores(blob.model, x[perm], stats)
    assert np.allclose(a.cells[perm], b.cells, atol=1e-12)


def test_checksum_mismatch(blob, fitted):
    _, stats = fitted
    other = mlp(20, [8], 4, seed=5)
    with pytest.raises(StatsMismatchError):
        z_scores(other, blob.xte[:2], stats)


def test_calibration_boundaries(blob, fitted):
    _, stats = fitted
    clean = z_scores(blob.model, blob.xca[:300], stats)
    adv = z_scores(blob.model, blob.xte_adv[:100], stats)
    everything = calibrate_thresholds(stats, clean, adv, 1.0)
    assert np.all(np.isneginf(everything.thresholds[~np.eye(4, dtype=bool)]))
    assert detect(adv, everything).mean() == 1.0
    nothing = calibrate_thresholds(stats, clean, adv, 0.0)
    assert detect(clean, nothing).mean() == 0.0
    agg = clean.aggregated(stats)
    for y in range(4):
        for z in range(4):
            sel = clean.pred == y
            if z != y and sel.any():
                assert nothing.thresholds[y, z] > agg[sel, z].max()


def test_thresholds_monotone_in_level(blob, fitted):
    _, stats = fitted
    clean = z_scores(blob.model, blob.xca[:300], stats)
    prev_tau, prev_rate = None, -1
    for a in [0.001, 0.01, 0.05, 0.2]:
        cand = thresholds_at_level(stats, clean, a)
        rate = detect(clean, cand).mean()
        assert rate >= prev_rate
        if prev_tau is not None:
            assert np.all(cand.thresholds <= prev_tau)
        prev_tau, prev_rate = cand.thresholds, rate


def manual_stats(k, sources=("gaussian",), cells_per_source=1, tau=0.0):
    specs = tuple(NoiseSpec(s, 0.1 * (j + 1), 4, 0) for s in sources for j in range(cells_per_source))
    grid = NoiseGrid(specs, 2)
    n = len(specs)
    t = np.full((k, k), float(tau))
    np.fill_diagonal(t, 0.0)
    return OddsStatistics(np.zeros((n, k, k)), np.ones((n, k, k)), np.full(k, 10), grid, "x",
                          thresholds=t, source_thresholds=np.repeat(t[None], len(sources), 0))


def record(cells, pred):
    cells = np.asarray(cells, dtype=float)
    return ZScores(np.arange(len(cells)), np.asarray(pred), cells)


def test_far_below_threshold_is_clean():
    stats = manual_stats(3, tau=1.0)
    s = record([[[0, -5, -7]]], [0])
    assert not detect(s, stats)[0]
    assert correct(s, stats)[0] == 0


def test_boundary_is_flagged():
    stats = manual_stats(3, tau=1.5)
    s = record([[[0, 1.5, -2]]], [0])
    assert detect(s, stats)[0]
    assert correct(s, stats)[0] == 1


def test_single_source_vote_reduces():
    stats = manual_stats(3, cells_per_source=3, tau=0.5)
    rng = np.random.default_rng(0)
    cells = rng.normal(0, 1, (200, 3, 3))
    pred = rng.integers(0, 3, 200)
    cells[np.arange(200), :, pred] = 0
    s = record(cells, pred)
    assert np.array_equal(detect(s, stats), votes(s, stats)[:, 0])


def test_majority_vote():
    stats = manual_stats(2, sources=("uniform", "gaussian", "bernoulli-sign"), tau=1.0)
    s = record([[[0, 2], [0, 2], [0, 0]], [[0, 2], [0, 0], [0, 0]]], [0, 0])
    assert detect(s, stats).tolist() == [True, False]


def test_two_classes_correct_to_other():
    stats = manual_stats(2, tau=0.0)
    s = record([[[0, 3]], [[4, 0]]], [0, 1])
    assert detect(s, stats).all()
    assert correct(s, stats).tolist() == [1, 0]


def test_correct_consistent_with_detect(blob, fitted):
    _, stats = fitted
    clean = z_scores(blob.model, blob.xca[:300], stats)
    adv = z_scores(blob.model, blob.xte_adv[:200], stats)
    cal = calibrate_thresholds(stats, clean, adv, 0.05)
    both = ZScores.concat([clean, adv])
    g = correct(both, cal)
    assert np.array_equal(g == both.pred, ~detect(both, cal))


def test_correction_ties_go_to_lowest_class():
    stats = manual_stats(4, tau=0.0)
    s = record([[[0, 2, 2, 1]]], [0])
    assert correct(s, stats)[0] == 1
