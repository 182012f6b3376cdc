"""Gradient attacks: PGD (L-inf / L2), Carlini-Wagner L2, EOT-PGD, DeepFool."""
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .noise import NoiseGrid, NoiseSpec, draw


class DegenerateGradientWarning(UserWarning):
    pass


class DeepFoolError(RuntimeError):
    def __init__(self, msg, distance, point):
        super().__init__(msg)
        self.distance = distance
        self.point = point


@dataclass(frozen=True)
class AttackSpec:
    variant: str = "pgd"
    norm: str = "linf"
    epsilon: float = 0.1
    alpha: float = None
    iterations: int = 20
    targeted: int = None
    random_init: bool = True
    seed: int = 0
    eot_samples: int = 1
    noise: object = None  # NoiseSpec or NoiseGrid for eot-pgd

    def __post_init__(self):
        if self.variant not in ("pgd", "cw", "eot-pgd", "deepfool"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon <= 0 or self.iterations < 1 or (self.alpha is not None and self.alpha <= 0):
            raise ValueError("epsilon and alpha must be positive, iterations >= 1")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")

    @property
    def step(self):
        return 2.5 * self.epsilon / self.iterations if self.alpha is None else self.alpha

    def with_seed(self, seed):
        return replace(self, seed=seed)

    def to_dict(self):
        d = {"variant": self.variant, "norm": self.norm, "epsilon": self.epsilon, "alpha": self.step,
             "iterations": self.iterations, "targeted": self.targeted, "random_init": self.random_init,
             "seed": self.seed, "eot_samples": self.eot_samples}
        if self.noise is not None:
            d["noise"] = self.noise.to_dict()
        return d


@dataclass(frozen=True)
class CWSpec:
    kappa: float = 0.0
    c_range: tuple = (1e-3, 1e2)
    search_steps: int = 10
    steps: int = 100
    lr: float = 0.01
    targeted: int = None

    def __post_init__(self):
        if self.kappa < 0 or self.c_range[0] <= 0 or self.c_range[1] < self.c_range[0]:
            raise ValueError("kappa must be >= 0 and the c range positive")

    def to_dict(self):
        return {"variant": "cw", "norm": "l2", "kappa": self.kappa, "c_range": list(self.c_range),
                "search_steps": self.search_steps, "steps": self.steps, "lr": self.lr, "targeted": self.targeted}


def project_ball(x, center, eps, norm, domain=True):
    """Project onto the eps-ball around center, intersected with [0,1]^D."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    center = np.asarray(center, dtype=float)
    if x.shape != center.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {center.shape}")
    d = x - center
    if norm == "linf":
        d = np.clip(d, -eps, eps)
    else:
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        d = d * np.minimum(1.0, eps / np.maximum(n, 1e-300))
    out = center + d
    if domain:
        # for a center inside the cube, clipping only shrinks |x - center|
        out = np.clip(out, 0.0, 1.0)
    return out


def _random_init(x, spec, ids):
    out = np.empty_like(x)
    for r, i in enumerate(ids):
        rng = np.random.default_rng([spec.seed, int(i)])
        if spec.norm == "linf":
            out[r] = rng.uniform(-spec.epsilon, spec.epsilon, x.shape[1])
        else:
            v = rng.standard_normal(x.shape[1])
            v /= np.linalg.norm(v)
            out[r] = v * spec.epsilon * rng.uniform() ** (1.0 / x.shape[1])
    return project_ball(x + out, x, spec.epsilon, spec.norm)


def _iterate(model, x, spec, label, grad_fn, ids):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    if spec.targeted is not None:
        y = np.full(len(x), spec.targeted)
        sign = -1.0
    else:
        y = model.predict(x) if label is None else np.broadcast_to(np.asarray(label), (len(x),)).copy()
        sign = 1.0
    xa = _random_init(x, spec, ids) if spec.random_init else x.copy()
    alive = np.zeros(len(x), dtype=bool)
    for t in range(spec.iterations):
        g = sign * grad_fn(xa, y, t)
        alive |= np.any(g != 0, axis=1)
        if spec.norm == "linf":
            step = np.sign(g)
        else:
            n = np.linalg.norm(g, axis=1, keepdims=True)
            step = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
        xa = project_ball(xa + spec.step * step, x, spec.epsilon, spec.norm)
    if not alive.all():
        warnings.warn(f"{int((~alive).sum())} sample(s) had an exactly zero gradient", DegenerateGradientWarning)
    return xa[0] if single else xa


def pgd_attack(model, x, spec, label=None, ids=None):
    """PGD ascending cross-entropy from y = F(x) unless ``label`` is given.

    ``ids`` are per-sample identifiers used to derive the random start, so
    results do not depend on how a dataset is batched.
    """
    def grad(xa, y, t):
        return model.loss_grad(xa, y)[1]
    return _iterate(model, x, spec, label, grad, ids)


def _eot_draws(noise, seed, sid, t, k, dim):
    """k fresh draws for sample ``sid`` at step t; a grid mixes its cells uniformly."""
    rng = np.random.default_rng([seed, int(sid), t, 1])
    if isinstance(noise, NoiseGrid):
        cells = rng.integers(0, len(noise), size=k)
        out = np.empty((k, dim))
        for c in np.unique(cells):
            sel = cells == c
            spec = noise.specs[c]
            out[sel] = draw(rng, spec.source, spec.magnitude, (int(sel.sum()), dim))
        return out
    return draw(rng, noise.source, noise.magnitude, (k, dim))


def eot_pgd_attack(model, x, spec, label=None, noise=None, ids=None):
    """PGD on the cross-entropy averaged over ``spec.eot_samples`` noise draws per step."""
    noise = spec.noise if noise is None else noise
    if noise is None:
        noise = NoiseSpec("uniform", 0.0, 1)
    k = spec.eot_samples
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    sid = np.arange(len(x2)) if ids is None else np.asarray(ids)

    def grad(xa, y, t):
        n, dim = xa.shape
        eta = np.stack([_eot_draws(noise, spec.seed, sid[i], t, k, dim) for i in range(n)])
        v = xa[:, None, :] + eta
        inside = (v >= 0) & (v <= 1)
        g = model.loss_grad(np.clip(v, 0, 1).reshape(n * k, dim), np.repeat(y, k))[1]
        g = (g.reshape(n, k, dim) * inside).sum(axis=1) / k
        return g

    return _iterate(model, x, spec, label, grad, ids)


def cw_objective(logits, y, kappa=0.0):
    """max(max_{z != y} f_z - f_y, -kappa); non-positive iff y wins (with margin kappa)."""
    f = np.atleast_2d(logits)
    y = np.broadcast_to(np.asarray(y), (len(f),))
    other = f.copy()
    other[np.arange(len(f)), y] = -np.inf
    val = np.maximum(other.max(axis=1) - f[np.arange(len(f)), y], -kappa)
    return val[0] if np.ndim(logits) == 1 else val


@dataclass
class CWResult:
    x_adv: np.ndarray
    success: np.ndarray
    c: np.ndarray


def cw_attack(model, x, spec, label=None):
    """Carlini-Wagner L2 with geometric bisection over c and clipping to the domain.

    Minimises ||dx||_2^2 + c * F(x + dx) by plain gradient steps. Untargeted
    attacks use F = max(f_y - max_{z != y} f_z, -kappa) with y = F(x) unless
    ``label`` is given; targeted ones use the margin toward the target.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, k = len(x), model.num_classes
    rows = np.arange(n)
    if spec.targeted is not None:
        y = np.full(n, spec.targeted)
    else:
        y = model.predict(x) if label is None else np.broadcast_to(np.asarray(label), (n,)).copy()

    def margin(f):
        other = f.copy()
        other[rows, y] = -np.inf
        zbest = other.argmax(axis=1)
        if spec.targeted is not None:
            return other[rows, zbest] - f[rows, y], zbest, -1.0
        return f[rows, y] - other[rows, zbest], zbest, 1.0

    def succeeded(f):
        m = margin(f)[0]
        pred = f.argmax(axis=1)
        hit = pred == y if spec.targeted is not None else pred != y
        return hit & (m <= -spec.kappa) if spec.kappa > 0 else hit & (m <= 0)

    lo = np.full(n, float(spec.c_range[0]))
    hi = np.full(n, float(spec.c_range[1]))
    best = x.copy()
    best_c = np.full(n, np.nan)
    found = np.zeros(n, dtype=bool)
    for _ in range(spec.search_steps):
        c = np.sqrt(lo * hi)
        d = np.zeros_like(x)
        run_best = x.copy()
        run_norm = np.full(n, np.inf)
        for _ in range(spec.steps + 1):
            xa = x + d
            f = model.logits(xa)
            ok = succeeded(f)
            nrm = np.sum(d * d, axis=1)
            better = ok & (nrm < run_norm)
            run_best[better] = xa[better]
            run_norm[better] = nrm[better]
            m, zbest, s = margin(f)
            active = m > -spec.kappa
            coef = np.zeros((n, k))
            coef[rows, y] = s
            coef[rows, zbest] -= s
            coef *= (active * c)[:, None]
            g = 2.0 * d + model.logit_grad(xa, coef)
            d = np.clip(x + d - spec.lr * g, 0.0, 1.0) - x
        hit = np.isfinite(run_norm)
        best[hit] = run_best[hit]
        best_c[hit] = c[hit]
        found |= hit
        hi = np.where(hit, c, hi)
        lo = np.where(hit, lo, c)
    return CWResult(best, found, best_c)


def deepfool_distance(model, x, tol=1e-4, overshoot=0.02, max_iter=100):
    """Distance to the nearest decision boundary: DeepFool, then bisection on the logit gap."""
    x0 = np.asarray(x, dtype=float)
    k = model.num_classes

    def gap(p):
        f = np.sort(model.logits(p))
        return f[-1] - f[-2]

    if gap(x0) < tol:
        return 0.0, x0.copy()
    k0 = int(model.predict(x0))
    others = [j for j in range(k) if j != k0]
    r_tot = np.zeros_like(x0)
    xi = x0
    for _ in range(max_iter):
        if int(model.predict(xi)) != k0:
            break
        f = model.logits(xi)
        coef = np.zeros((len(others), k))
        coef[np.arange(len(others)), others] = 1.0
        coef[:, k0] -= 1.0
        w = model.logit_grad(np.repeat(xi[None], len(others), 0), coef)
        fd = f[others] - f[k0]
        wn = np.linalg.norm(w, axis=1)
        dist = np.abs(fd) / np.maximum(wn, 1e-300)
        l = int(np.argmin(dist))
        r = (np.abs(fd[l]) + 1e-12) / max(wn[l] ** 2, 1e-300) * w[l]
        r_tot = r_tot + r
        xi = x0 + (1 + overshoot) * r_tot
    else:
        raise DeepFoolError("DeepFool did not cross the boundary", float(np.linalg.norm(xi - x0)), xi)
    lo, hi = 0.0, 1.0
    seg = xi - x0
    for _ in range(200):
        p = x0 + hi * seg
        if gap(p) < tol:
            return float(np.linalg.norm(p - x0)), p
        mid = 0.5 * (lo + hi)
        if int(model.predict(x0 + mid * seg)) == k0:
            lo = mid
        else:
            hi = mid
    p = x0 + hi * seg
    raise DeepFoolError("bisection did not reach the tolerance", float(np.linalg.norm(p - x0)), p)


def bernoulli_thin(delta, q, seed=0):
    """Keep each coordinate independently with probability q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    delta = np.asarray(delta, dtype=float)
    keep = np.random.default_rng([seed, 17]).random(delta.shape) < q
    return delta * keep


def attack_success(model, x, x_adv, label=None):
    ref = model.predict(x) if label is None else np.asarray(label)
    return model.predict(x_adv) != ref


def tune_epsilon(model, x, norm="linf", grid=None, target=0.95, iterations=20, seed=0):
    """Smallest grid epsilon whose PGD flips at least ``target`` of the predictions."""
    if grid is None:
        grid = np.geomspace(2e-3, 0.5, 40) if norm == "linf" else np.geomspace(1e-2, 3.0, 40)
    y0 = model.predict(x)
    for eps in grid:
        spec = AttackSpec("pgd", norm, float(eps), iterations=iterations, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGradientWarning)
            xa = pgd_attack(model, x, spec)
        if np.mean(model.predict(xa) != y0) >= target:
            return float(eps)
    raise RuntimeError("no epsilon in the grid reaches the target success rate")
