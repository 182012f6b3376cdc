"""Per-class multinomial logistic correctors on Z-score vectors."""
from dataclasses import dataclass, field

import numpy as np

from .odds import correct, detect


@dataclass
class LogisticModel:
    """One softmax regression C_y per predicted class y.

    ``weights[y]`` is (K, K-1) mapping the K-1 candidate Z-scores plus a
    trailing bias to K-1 candidate scores; ``None`` marks a class that falls
    back to argmax correction.
    """
    weights: list
    attack: str = "pgd-linf"
    l2: float = 1e-3
    fallback: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.weights)


def _softmax(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax(features, targets, n_out, l2=1e-3, tol=1e-5, max_epochs=20000):
    """Full-batch gradient descent on mean cross-entropy + l2 * ||W||^2 (bias unpenalised)."""
    a = np.hstack([features, np.ones((len(features), 1))])
    y = np.eye(n_out)[targets]
    w = np.zeros((a.shape[1], n_out))
    pen = np.ones((a.shape[1], 1))
    pen[-1] = 0.0
    # step from a curvature bound of the softmax loss
    lip = 0.5 * np.linalg.eigvalsh(a.T @ a / len(a)).max() + 2 * l2
    lr = 1.0 / lip
    gnorm = np.inf
    for epoch in range(max_epochs):
        p = _softmax(a @ w)
        g = a.T @ (p - y) / len(a) + 2 * l2 * pen * w
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            break
        w -= lr * g
    return w, {"epochs": epoch + 1, "grad_norm": float(gnorm)}


def train_meta(scores, sources, stats, l2=1e-3, min_count=5, flagged_only=True, attack="pgd-linf",
               tol=1e-5, max_epochs=20000):
    """Fit C_y on records predicted as y whose true source class differs from y."""
    k = stats.num_classes
    sources = np.asarray(sources)
    keep = sources != scores.pred
    if flagged_only and stats.thresholds is not None:
        keep &= detect(scores, stats)
    feats = scores.candidates(stats)
    weights, fallback, info = [], [], {}
    for y in range(k):
        sel = keep & (scores.pred == y)
        cand = [z for z in range(k) if z != y]
        if sel.sum() < min_count:
            weights.append(None)
            fallback.append(y)
            continue
        t = np.searchsorted(cand, sources[sel])
        w, inf = fit_softmax(feats[sel], t, k - 1, l2, tol, max_epochs)
        inf["count"] = int(sel.sum())
        inf["train_accuracy"] = float(np.mean(meta_scores(feats[sel], w).argmax(axis=1) == t))
        weights.append(w)
        info[str(y)] = inf
    return LogisticModel(weights, attack, l2, fallback, info)


def meta_scores(features, w):
    return np.hstack([features, np.ones((len(features), 1))]) @ w


def meta_correct(scores, meta, stats):
    """Flagged records: argmax of C_y over z != y. Unflagged ones keep y.
    Classes without a trained C_y use the argmax correction."""
    k = stats.num_classes
    out = correct(scores, stats)
    flag = detect(scores, stats)
    feats = scores.candidates(stats)
    for y in range(k):
        w = meta.weights[y]
        sel = flag & (scores.pred == y)
        if w is None or not sel.any():
            continue
        cand = np.array([z for z in range(k) if z != y])
        out[sel] = cand[meta_scores(feats[sel], w).argmax(axis=1)]
    return out
