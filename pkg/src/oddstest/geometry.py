"""Feature-space and ambient-space diagnostics as plot-ready arrays."""
import warnings
from dataclasses import dataclass

import numpy as np

from .odds import calibrate_thresholds, correct, detect


@dataclass
class RayProfile:
    t: np.ndarray
    norm: np.ndarray = None
    alignment: np.ndarray = None
    probs: np.ndarray = None


@dataclass
class ConeGrid:
    s: np.ndarray
    t: np.ndarray
    values: np.ndarray  # (len(t), len(s))
    draws: int


def _softmax(f):
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_grid(t):
    t = np.asarray(t, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("grid must be strictly increasing")
    return t


def feature_ray_profile(model, x, direction, t_grid, source=None, target=None):
    """Norm of phi(x + t dir) - phi(x) and its alignment with a weight difference.

    With ``source``/``target`` the alignment uses w_target - w_source;
    otherwise the largest alignment over w_z - w_y, y = F(x), z != y.
    """
    direction = np.asarray(direction, dtype=float)
    if not np.any(direction):
        raise ValueError("direction must be nonzero")
    t = _check_grid(t_grid)
    pts = x[None] + t[:, None] * direction[None]
    dphi = model.features(pts) - model.features(x)[None]
    w = model.logit_weights
    if source is not None and target is not None:
        align = dphi @ (w[target] - w[source])
    else:
        y = int(model.predict(x))
        diffs = np.delete(w - w[y], y, axis=0)
        align = (dphi @ diffs.T).max(axis=1)
    return RayProfile(t, np.linalg.norm(dphi, axis=1), align, _softmax(model.logits(pts)))


def softmax_ray(model, x, direction, t_grid):
    t = _check_grid(t_grid)
    pts = x[None] + t[:, None] * np.asarray(direction, dtype=float)[None]
    return RayProfile(t, probs=_softmax(model.logits(pts)))


def orthogonal_draws(delta, draws, seed=0):
    """White gaussian vectors projected orthogonal to delta, rescaled to ||delta||."""
    rng = np.random.default_rng([seed, 3])
    u = delta / np.linalg.norm(delta)
    n = rng.standard_normal((draws, len(delta)))
    n -= np.outer(n @ u, u)
    n -= np.outer(n @ u, u)
    return n * (np.linalg.norm(delta) / np.linalg.norm(n, axis=1))[:, None]


def cone_grid(model, x_nat, delta, s_grid, t_grid, draws=32, seed=0, clip=True):
    """E_n[softmax_{y*}(x* + t delta + s n)] over orthogonal draws n."""
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta) or draws < 1:
        raise ValueError("delta must be nonzero and draws >= 1")
    s, t = _check_grid(s_grid), _check_grid(t_grid)
    y = int(model.predict(x_nat))
    n = orthogonal_draws(delta, draws, seed)
    pts = (x_nat[None, None, None] + t[:, None, None, None] * delta
           + s[None, :, None, None] * n[None, None])
    if clip:
        pts = np.clip(pts, 0.0, 1.0)
    p = _softmax(model.logits(pts.reshape(-1, len(delta))))[:, y]
    return ConeGrid(s, t, p.reshape(len(t), len(s), draws).mean(axis=2), draws)


class NoCrossoverError(ValueError):
    pass


def logit_crossover(model, x_nat, x_adv, tol=1e-4):
    """t in [0,1] where f_{y*} = f_y along x* + t (x_adv - x*), by bisection."""
    ys, ya = int(model.predict(x_nat)), int(model.predict(x_adv))
    if ys == ya:
        raise NoCrossoverError("natural and adversarial predictions agree")
    delta = x_adv - x_nat

    def h(t):
        f = model.logits(x_nat + t * delta)
        return f[ys] - f[ya]

    lo, hi = 0.0, 1.0
    if not (h(lo) >= 0 and h(hi) <= 0):
        raise NoCrossoverError("no sign change of the logit gap on [0, 1]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if h(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def nn_distance_ratio(x_adv, x_nat, corpus):
    """||x_adv - x*|| / ||x_adv - x_nn|| with an exact nearest neighbour in ``corpus``."""
    corpus = np.asarray(corpus, dtype=float)
    if corpus.size == 0:
        raise ValueError("empty corpus")
    d = np.sqrt(np.sum((corpus - x_adv) ** 2, axis=1)).min()
    if d == 0:
        raise ZeroDivisionError("zero nn-distance")
    return float(np.linalg.norm(x_adv - x_nat) / d)


def nn_distance_ratios(x_adv, x_nat, corpus, chunk=256):
    """Batched ratios; row i compares x_adv[i] against the corpus."""
    corpus = np.asarray(corpus, dtype=float)
    if corpus.size == 0:
        raise ValueError("empty corpus")
    cn = np.sum(corpus ** 2, axis=1)
    out = np.empty(len(x_adv))
    for s in range(0, len(x_adv), chunk):
        xa = x_adv[s:s + chunk]
        d2 = np.sum(xa ** 2, axis=1)[:, None] + cn[None] - 2 * xa @ corpus.T
        d = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
        if np.any(d == 0):
            raise ZeroDivisionError("zero nn-distance")
        out[s:s + chunk] = np.linalg.norm(xa - x_nat[s:s + chunk], axis=1) / d
    return out


def preimage_step(model, x, target_delta, step):
    """One Jacobian-transpose step x+ = x + step J^T dphi toward phi(x) + dphi."""
    dphi = np.asarray(target_delta, dtype=float)
    if not np.any(dphi):
        raise ValueError("target delta must be nonzero")
    g = model.feature_grad(x, dphi)
    if not np.any(g):
        warnings.warn("zero Jacobian-transpose direction")
        return x.copy(), 0.0
    xp = x + step * g
    moved = model.features(xp) - model.features(x)
    return xp, float(np.linalg.norm(dphi) - np.linalg.norm(dphi - moved))


def preimage_search(model, x, target_delta, halvings=5):
    """Best of ``halvings`` step sizes, halving from a Gauss-Newton estimate."""
    dphi = np.asarray(target_delta, dtype=float)
    g = model.feature_grad(x, dphi)
    if not np.any(g):
        return x.copy(), 0.0, 0.0
    h = 1e-6 / np.linalg.norm(g)
    jjg = (model.features(x + h * g) - model.features(x)) / h
    s0 = float(g @ g / max(jjg @ jjg, 1e-300))
    best = (x.copy(), 0.0, 0.0)
    for i in range(halvings):
        step = s0 / 2 ** i
        xp, imp = preimage_step(model, x, dphi, step)
        if imp > best[1]:
            best = (xp, imp, step)
    return best


def roc_sweep(stats, clean, adversarial, clean_labels, adv_labels, fpr_grid):
    """(fpr, tpr, clean accuracy, adversarial accuracy) after recalibrating at each target."""
    rows = []
    for target in fpr_grid:
        s = calibrate_thresholds(stats, clean, adversarial, float(target))
        rows.append((float(detect(clean, s).mean()), float(detect(adversarial, s).mean()),
                     float(np.mean(correct(clean, s) == clean_labels)),
                     float(np.mean(correct(adversarial, s) == adv_labels))))
    return rows


def roc_auc(rows):
    pts = sorted([(0.0, 0.0)] + [(r[0], r[1]) for r in rows] + [(1.0, 1.0)])
    f = np.array([p[0] for p in pts])
    t = np.array([p[1] for p in pts])
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2))
