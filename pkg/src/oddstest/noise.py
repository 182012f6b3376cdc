"""Noise sources and the source x magnitude probing grid."""
from dataclasses import dataclass, replace

import numpy as np

SOURCES = ("uniform", "gaussian", "bernoulli-sign")


@dataclass(frozen=True)
class NoiseSpec:
    source: str
    magnitude: float
    samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown noise source {self.source!r}")
        if self.magnitude < 0 or self.samples < 1:
            raise ValueError("magnitude must be >= 0 and samples >= 1")

    def to_dict(self):
        return {"source": self.source, "magnitude": self.magnitude, "samples": self.samples, "seed": self.seed}


def draw(rng, source, magnitude, shape):
    if source == "uniform":
        return magnitude * rng.uniform(-1.0, 1.0, size=shape)
    if source == "gaussian":
        return magnitude * rng.standard_normal(shape)
    return magnitude * (2.0 * rng.integers(0, 2, size=shape) - 1.0)


def sample_noise(spec, shape, draw_index):
    """One noise draw, a pure function of (spec.seed, draw_index)."""
    rng = np.random.default_rng([spec.seed, int(draw_index)])
    return draw(rng, spec.source, spec.magnitude, shape)


def noise_block(spec, dim, start=0, count=None):
    """Draws start..start+count-1 stacked into a (count, dim) array."""
    count = spec.samples if count is None else count
    return np.stack([sample_noise(spec, (dim,), start + k) for k in range(count)])


@dataclass(frozen=True)
class NoiseGrid:
    specs: tuple
    input_dim: int = 0

    def __post_init__(self):
        if not self.specs:
            raise ValueError("empty noise grid")
        for src in self.sources:
            mags = [s.magnitude for s in self.specs if s.source == src]
            if any(b <= a for a, b in zip(mags, mags[1:])):
                raise ValueError(f"magnitudes for {src} must be strictly increasing")

    def __len__(self):
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    @property
    def sources(self):
        seen = []
        for s in self.specs:
            if s.source not in seen:
                seen.append(s.source)
        return seen

    def source_index(self):
        """Index into ``sources`` for every cell."""
        srcs = self.sources
        return np.array([srcs.index(s.source) for s in self.specs])

    def with_samples(self, n):
        return NoiseGrid(tuple(replace(s, samples=n) for s in self.specs), self.input_dim)

    def to_dict(self):
        return {"input_dim": self.input_dim, "specs": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(NoiseSpec(**s) for s in d["specs"]), d.get("input_dim", 0))


def default_grid(input_dim, base_magnitude, samples=256, seed=0, sources=SOURCES, levels=5):
    """Sources x log-spaced magnitudes over [base/4, 4 base]."""
    if base_magnitude <= 0:
        raise ValueError("base magnitude must be positive")
    mags = base_magnitude * np.geomspace(0.25, 4.0, levels)
    specs = []
    for s in sources:
        for m in mags:
            specs.append(NoiseSpec(s, float(m), samples, seed * 1000 + len(specs)))
    return NoiseGrid(tuple(specs), int(input_dim))
