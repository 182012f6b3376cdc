"""Synthetic blob datasets in the unit hypercube."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    splits: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if len(self.x) == 0:
            raise ValueError("empty dataset")
        if self.x.min() < 0 or self.x.max() > 1:
            raise ValueError("inputs must lie in [0, 1]")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError("labels out of range")
        seen = np.zeros(len(self.x), dtype=int)
        for idx in self.splits.values():
            seen[idx] += 1
        if seen.max(initial=0) > 1:
            raise ValueError("splits overlap")

    def __len__(self):
        return len(self.y)

    def split(self, name):
        idx = self.splits[name]
        return self.x[idx], self.y[idx], idx


def gen_blobs(classes, dim, count, separation=3.0, seed=0, signal_std=0.15, signal_base=0.1,
              background_std=0.1, background_center=-0.1, fractions=(0.4, 0.25, 0.1, 0.25)):
    """Gaussian blobs whose means form a scaled simplex in the first K coordinates.

    Class k sits at ``signal_base + separation * signal_std * sqrt(2)`` on
    coordinate k and at ``signal_base`` on the other class coordinates, so
    every pair of means is ``2 * separation * signal_std`` apart. The
    remaining coordinates are background noise centred just below zero,
    which makes them sparse once clipped into the cube.
    Splits are train/calibration/holdout/test in ``fractions``.
    """
    if count <= 0:
        raise ValueError("empty dataset requested")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if dim < classes:
        raise ValueError("need dim >= classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % classes)
    mean = np.full((classes, dim), float(background_center))
    mean[:, :classes] = signal_base
    mean[np.arange(classes), np.arange(classes)] += separation * signal_std * np.sqrt(2.0)
    std = np.full(dim, float(background_std))
    std[:classes] = signal_std
    x = np.clip(mean[labels] + rng.standard_normal((count, dim)) * std, 0.0, 1.0)
    bounds = np.cumsum(np.round(np.asarray(fractions) * count).astype(int))
    bounds[-1] = count
    names = ("train", "calibration", "holdout", "test")
    splits, start = {}, 0
    for name, end in zip(names, bounds):
        splits[name] = np.arange(start, end)
        start = end
    prov = {"generator": "blobs", "classes": classes, "dim": dim, "count": count, "separation": separation,
            "seed": seed, "signal_std": signal_std, "signal_base": signal_base,
            "background_std": background_std, "background_center": background_center,
            "fractions": list(fractions)}
    return Dataset(x, labels, classes, splits, prov)
