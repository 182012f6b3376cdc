"""Perturbed log-odds statistics, Z-scores, thresholds, detection and correction."""
from dataclasses import dataclass, field, replace

import numpy as np

from .noise import NoiseGrid, noise_block


class StatisticsError(ValueError):
    pass


class EmptyClassError(StatisticsError):
    def __init__(self, classes):
        self.classes = list(classes)
        super().__init__(f"too few correctly classified training points for class(es) {self.classes}")


class DegenerateStatisticsError(StatisticsError):
    def __init__(self, mu, cells):
        self.mu = mu
        self.cells = cells
        super().__init__(f"zero variance in {len(cells)} (cell, y, z) entries, first {cells[:3]}")


class StatsMismatchError(ValueError):
    pass


def perturbed_log_odds(model, x, y, z, eta):
    """g_{y,z}(x, eta) = f_{y,z}(clip(x + eta)) - f_{y,z}(x)."""
    k = model.num_classes
    if not (0 <= y < k and 0 <= z < k):
        raise IndexError(f"class out of range for K={k}")
    f0 = model.logits(x)
    f1 = model.logits(np.clip(np.asarray(x) + eta, 0.0, 1.0))
    return (f1[..., z] - f1[..., y]) - (f0[..., z] - f0[..., y])


def perturbed_log_odds_all(model, x, y, eta, chunk=64):
    """All g_{y_i,z}(x_i, eta_j) as an (n, draws, K) array for per-sample classes y."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    n, dim = x.shape
    m = len(eta)
    out = np.empty((n, m, model.num_classes))
    for s in range(0, n, chunk):
        xs, ys = x[s:s + chunk], y[s:s + chunk]
        r = np.arange(len(xs))
        f0 = model.logits(xs)
        d0 = f0 - f0[r, ys][:, None]
        v = np.clip(xs[:, None, :] + eta[None], 0.0, 1.0).reshape(-1, dim)
        f = model.logits(v).reshape(len(xs), m, -1)
        d = f - f[r, :, ys][:, :, None]
        out[s:s + chunk] = d - d0[:, None, :]
    return out


@dataclass
class OddsStatistics:
    mu: np.ndarray            # (cells, K, K)
    sigma: np.ndarray         # (cells, K, K)
    counts: np.ndarray        # (K,) correctly classified points per class
    grid: NoiseGrid
    model_checksum: str
    aggregation: str = "average"
    vote: str = "majority"
    thresholds: np.ndarray = None         # (K, K) on the aggregated score
    source_thresholds: np.ndarray = None  # (sources, K, K)
    best_cell: int = None
    level: float = None
    fallback_pairs: list = field(default_factory=list)
    calibration: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.mu.shape[1]

    @property
    def pair_counts(self):
        """Number of (point, draw) values behind each (y, z) entry of every cell."""
        c = np.outer(self.counts, np.ones(self.num_classes, dtype=int))
        np.fill_diagonal(c, 0)
        return c * self.grid.specs[0].samples

    def uses_vote(self):
        return self.vote == "majority" and self.aggregation == "average" and len(self.grid.sources) > 1


def fit_statistics(model, x, labels, grid, min_count=10, chunk=64):
    """Per-cell mean and std of g_{y*,z} over correctly classified points of class y*."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    k = model.num_classes
    pred = model.predict(x)
    ok = pred == labels
    counts = np.array([np.sum(ok & (labels == c)) for c in range(k)])
    short = [c for c in range(k) if counts[c] < max(min_count, 1)]
    mu = np.zeros((len(grid), k, k))
    sigma = np.ones((len(grid), k, k))
    for c, spec in enumerate(grid):
        eta = noise_block(spec, x.shape[1])
        for y in range(k):
            sel = x[ok & (labels == y)]
            if len(sel) == 0:
                continue
            g = perturbed_log_odds_all(model, sel, np.full(len(sel), y), eta, chunk)
            g = g.reshape(-1, k)
            m = g.mean(axis=0)
            mu[c, y] = m
            sigma[c, y] = np.sqrt(np.mean((g - m) ** 2, axis=0))
    mu[:, np.arange(k), np.arange(k)] = 0.0
    # a degenerate model is the more basic failure, so report it before empty classes
    bad = [(c, y, z) for c in range(len(grid)) for y in range(k) for z in range(k)
           if z != y and counts[y] > 0 and not sigma[c, y, z] > 0]
    if bad:
        raise DegenerateStatisticsError(mu, bad)
    if short:
        raise EmptyClassError(short)
    sigma[:, np.arange(k), np.arange(k)] = 1.0
    return OddsStatistics(mu, sigma, counts, grid, model.checksum())


def _check(model, stats):
    if stats.model_checksum != model.checksum():
        raise StatsMismatchError("statistics were fitted with a different model")


def standardized_draws(model, x, y, stats, cell, chunk=64):
    """Per-draw Z-scores (n, draws, K) of one grid cell, for reference classes y."""
    _check(model, stats)
    spec = stats.grid.specs[cell]
    eta = noise_block(spec, np.shape(x)[-1])
    g = perturbed_log_odds_all(model, x, y, eta, chunk)
    y = np.asarray(y)
    z = (g - stats.mu[cell, y][:, None, :]) / stats.sigma[cell, y][:, None, :]
    z[np.arange(len(y)), :, y] = 0.0
    return z


@dataclass
class ZScores:
    """Z-score records for a batch. ``cells`` holds the draw-averaged
    standardized log-odds of every grid cell, entry y set to 0."""
    ids: np.ndarray
    pred: np.ndarray
    cells: np.ndarray  # (n, cells, K)

    def __len__(self):
        return len(self.pred)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return ZScores(self.ids[idx], self.pred[idx], self.cells[idx])

    @staticmethod
    def concat(items):
        return ZScores(np.concatenate([i.ids for i in items]), np.concatenate([i.pred for i in items]),
                       np.concatenate([i.cells for i in items]))

    def aggregated(self, stats):
        if stats.aggregation == "best" and stats.best_cell is not None:
            return self.cells[:, stats.best_cell]
        return self.cells.mean(axis=1)

    def by_source(self, stats):
        src = stats.grid.source_index()
        return np.stack([self.cells[:, src == s].mean(axis=1) for s in range(src.max() + 1)], axis=1)

    def candidates(self, stats):
        """(n, K-1) aggregated Z-scores of the classes z != y in ascending order."""
        agg = self.aggregated(stats)
        k = agg.shape[1]
        mask = np.arange(k)[None, :] != self.pred[:, None]
        return agg[mask].reshape(len(agg), k - 1)


def z_scores(model, x, stats, ids=None, chunk=64):
    """Draw-averaged per-cell Z-scores, with y = F(x)."""
    _check(model, stats)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    y = model.predict(x)
    k = model.num_classes
    out = np.zeros((n, len(stats.grid), k))
    for c, spec in enumerate(stats.grid):
        eta = noise_block(spec, x.shape[1])
        g = perturbed_log_odds_all(model, x, y, eta, chunk).mean(axis=1)
        out[:, c] = (g - stats.mu[c, y]) / stats.sigma[c, y]
    out[np.arange(n), :, y] = 0.0
    ids = np.arange(n) if ids is None else np.asarray(ids)
    return ZScores(ids, y, out)


def _excess(scores, tau, pred):
    d = scores - tau[pred]
    d[np.arange(len(pred)), pred] = -np.inf
    return d


def votes(scores, stats):
    """Per-source flags (n, sources)."""
    src = scores.by_source(stats)
    return np.stack([_excess(src[:, s], stats.source_thresholds[s], scores.pred).max(axis=1) >= 0
                     for s in range(src.shape[1])], axis=1)


def detect(scores, stats):
    """Flag when max_{z != y} (gbar_{y,z} - tau_{y,z}) >= 0, majority-voted over sources."""
    if stats.thresholds is None:
        raise StatisticsError("thresholds are not calibrated")
    if stats.uses_vote():
        v = votes(scores, stats)
        return v.sum(axis=1) * 2 > v.shape[1]
    return _excess(scores.aggregated(stats), stats.thresholds, scores.pred).max(axis=1) >= 0


def correct(scores, stats):
    """G(x): the predicted class when unflagged, else argmax_{z != y} (gbar - tau)."""
    flag = detect(scores, stats)
    alt = _excess(scores.aggregated(stats), stats.thresholds, scores.pred).argmax(axis=1)
    return np.where(flag, alt, scores.pred)


def max_excess(scores, stats):
    return _excess(scores.aggregated(stats), stats.thresholds, scores.pred).max(axis=1)


def _upper_quantile(values, a):
    """Threshold flagging floor(a * n) of the values (ties may add more)."""
    n = len(values)
    m = int(np.floor(a * n + 1e-12))
    if m <= 0:
        return np.nextafter(values.max(), np.inf)
    if m >= n:
        return values.min()
    return np.sort(values)[::-1][m - 1]


def _pair_thresholds(scores, pred, k, a, fallback):
    tau = np.zeros((k, k))
    pooled = scores[np.arange(k)[None, :] != pred[:, None]]
    for y in range(k):
        sel = pred == y
        for z in range(k):
            if z == y:
                continue
            if sel.any():
                tau[y, z] = _upper_quantile(scores[sel, z], a)
            else:
                tau[y, z] = _upper_quantile(pooled, a)
                fallback.add((y, z))
    return tau


def thresholds_at_level(stats, clean, a):
    k = stats.num_classes
    fb = set()
    agg = _pair_thresholds(clean.aggregated(stats), clean.pred, k, a, fb)
    src = clean.by_source(stats)
    per = np.stack([_pair_thresholds(src[:, s], clean.pred, k, a, fb) for s in range(src.shape[1])])
    return replace(stats, thresholds=agg, source_thresholds=per, level=float(a), fallback_pairs=sorted(fb))


def _all_flagged(stats):
    k = stats.num_classes
    tau = np.full((k, k), -np.inf)
    np.fill_diagonal(tau, 0.0)
    s = len(stats.grid.sources)
    return replace(stats, thresholds=tau, source_thresholds=np.repeat(tau[None], s, 0), level=1.0,
                   fallback_pairs=[])


def _calibrate_level(stats, clean, target_fpr, iters=50):
    if target_fpr >= 1.0:
        return _all_flagged(stats)
    k = stats.num_classes
    sidak = 1.0 - (1.0 - target_fpr) ** (1.0 / (k - 1))
    lo, hi = 0.0, 1.0
    # bracket around the Sidak level, then bisect for the largest feasible one
    cand = thresholds_at_level(stats, clean, sidak)
    if detect(clean, cand).mean() <= target_fpr:
        lo = sidak
    else:
        hi = sidak
    best = thresholds_at_level(stats, clean, lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cand = thresholds_at_level(stats, clean, mid)
        if detect(clean, cand).mean() <= target_fpr:
            lo, best = mid, cand
        else:
            hi = mid
    return best


def calibrate_thresholds(stats, clean, adversarial, target_fpr=0.01):
    """Per-pair quantile thresholds at a common level, set as high as the clean FPR allows.

    Detection is monotone in the level, so the largest level with clean flag
    rate <= target also maximises detection on ``adversarial``. With the
    "best" aggregation the cell with the highest adversarial detection wins.
    """
    if len(clean) == 0 or len(adversarial) == 0:
        raise ValueError("holdouts must be nonempty")
    if not 0.0 <= target_fpr <= 1.0:
        raise ValueError("target FPR must lie in [0, 1]")
    if stats.aggregation == "best":
        best, best_tpr = None, -1.0
        for c in range(len(stats.grid)):
            cand = _calibrate_level(replace(stats, best_cell=c), clean, target_fpr)
            tpr = detect(adversarial, cand).mean()
            if tpr > best_tpr:
                best, best_tpr = cand, tpr
        out = best
    else:
        out = _calibrate_level(stats, clean, target_fpr)
    info = {"target_fpr": float(target_fpr), "clean_fpr": float(detect(clean, out).mean()),
            "adversarial_tpr": float(detect(adversarial, out).mean()), "level": out.level,
            "clean_count": len(clean), "adversarial_count": len(adversarial)}
    return replace(out, calibration=info)
