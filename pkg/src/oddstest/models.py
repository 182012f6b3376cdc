"""Classifiers with an explicit feature map and a linear logit layer.

Logits are f(x) = phi(x) @ W where phi carries a trailing constant 1, so
a per-class bias lives in the last row of W and f_y = <w_y, phi(x)> holds
exactly.
"""
import hashlib
import json
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Graph, ShapeError, evaluate, gradient


class TrainingError(RuntimeError):
    pass


def _arch_key(arch):
    return json.dumps(arch, sort_keys=True)


@lru_cache(maxsize=32)
def _build_graph(key):
    arch = json.loads(key)
    g = Graph()
    k = arch["num_classes"]
    if arch["kind"] == "mlp":
        h = g.input("x", (None, arch["input_dim"]))
        d = arch["input_dim"]
        for i, width in enumerate(arch["hidden"], 1):
            w = g.input(f"W{i}", (d, width))
            b = g.input(f"b{i}", (width,))
            h = g.relu(g.matmul(h, w) + b)
            d = width
    elif arch["kind"] == "conv":
        c, hh, ww = arch["input_shape"]
        h = g.input("x", (None, c, hh, ww))
        ks = arch.get("kernel", 3)
        for i, ch in enumerate(arch["channels"], 1):
            w = g.input(f"C{i}", (ch, c, ks, ks))
            b = g.input(f"c{i}", (ch,))
            h = g.relu(g.conv2d(h, w, b))
            if i == 1:
                h = g.maxpool2d(h)
            c = ch
        h = g.flatten(h)
        d = h.shape[1]
        for i, width in enumerate(arch.get("hidden", []), 1):
            w = g.input(f"W{i}", (d, width))
            b = g.input(f"b{i}", (width,))
            h = g.relu(g.matmul(h, w) + b)
            d = width
    else:
        raise ValueError(f"unknown architecture kind {arch['kind']!r}")
    phi = g.output("phi", g.append_one(h))
    w_out = g.input("W_out", (d + 1, k))
    logits = g.output("logits", g.matmul(phi, w_out))
    onehot = g.input("onehot", (None, k))
    g.output("ce", g.sum(g.logsumexp(logits) - g.dot(onehot, logits)))
    coef = g.input("coef", (None, k))
    g.output("lin", g.sum(g.dot(coef, logits)))
    phicoef = g.input("phicoef", (None, d + 1))
    g.output("phidot", g.sum(g.dot(phicoef, phi)))
    g.feature_dim = d + 1
    return g


def init_params(arch, seed=0):
    """He-normal initialisation; biases start at zero."""
    rng = np.random.default_rng(seed)
    g = _build_graph(_arch_key(arch))
    params = {}
    for name, node in g.inputs.items():
        if name in ("x", "onehot", "coef", "phicoef"):
            continue
        shape = node.shape
        if name[0] in "bc" and len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name == "W_out":
            w = rng.standard_normal(shape) / np.sqrt(shape[0] - 1)
            w[-1] = 0.0
            params[name] = w
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


def mlp(input_dim, hidden, num_classes, seed=0):
    arch = {"kind": "mlp", "input_dim": int(input_dim), "hidden": [int(h) for h in hidden],
            "num_classes": int(num_classes)}
    return Classifier(arch, init_params(arch, seed))


def linear(input_dim, num_classes, weights=None, bias=None):
    """phi = identity. ``weights`` has rows w_y of length input_dim."""
    arch = {"kind": "mlp", "input_dim": int(input_dim), "hidden": [], "num_classes": int(num_classes)}
    w = np.zeros((input_dim + 1, num_classes))
    if weights is not None:
        w[:-1] = np.asarray(weights, dtype=float).T
    if bias is not None:
        w[-1] = bias
    return Classifier(arch, {"W_out": w})


def tiny_cnn(input_shape, num_classes, channels=(8, 16), hidden=(), kernel=3, seed=0):
    arch = {"kind": "conv", "input_shape": [int(s) for s in input_shape], "channels": list(channels),
            "kernel": kernel, "hidden": list(hidden), "num_classes": int(num_classes)}
    return Classifier(arch, init_params(arch, seed))


class Classifier:
    """Immutable classifier. Inputs are flat vectors of length D, single or batched."""

    def __init__(self, arch, params):
        self.arch = dict(arch)
        self.params = {k: np.array(v) for k, v in params.items()}
        for v in self.params.values():
            v.setflags(write=False)
        self.graph = _build_graph(_arch_key(self.arch))
        if self.arch["num_classes"] < 2:
            raise ValueError("need at least two classes")

    @property
    def num_classes(self):
        return self.arch["num_classes"]

    @property
    def input_dim(self):
        if self.arch["kind"] == "mlp":
            return self.arch["input_dim"]
        return int(np.prod(self.arch["input_shape"]))

    @property
    def feature_dim(self):
        return self.graph.feature_dim

    @property
    def logit_weights(self):
        """Rows w_y (K, d+1); the last column is the bias."""
        return self.params["W_out"].T

    def _x(self, x):
        x = np.asarray(x)
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.input_dim:
            raise ShapeError("x", f"expected (..., {self.input_dim}), got {x.shape}")
        if self.arch["kind"] == "conv":
            xb = xb.reshape((len(xb),) + tuple(self.arch["input_shape"]))
        return xb, single

    def _run(self, x, outputs, **extra):
        xb, single = self._x(x)
        res = evaluate(self.graph, {"x": xb, **self.params, **extra}, outputs)
        if single:
            res = {k: v[0] for k, v in res.items()}
        return res

    def features(self, x):
        return self._run(x, ["phi"])["phi"]

    def logits(self, x):
        return self._run(x, ["logits"])["logits"]

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def log_odds(self, x, y, z):
        k = self.num_classes
        if not (0 <= y < k and 0 <= z < k):
            raise IndexError(f"class out of range for K={k}")
        f = self.logits(x)
        return f[..., z] - f[..., y]

    def _grad(self, out, x, **extra):
        xb, single = self._x(x)
        val, g = gradient(self.graph, out, {"x": xb, **self.params, **extra}, ["x"], return_value=True)
        gx = g["x"].reshape(len(xb), -1)
        return val, (gx[0] if single else gx)

    def loss_grad(self, x, labels):
        """Summed cross-entropy and its input gradient."""
        xb, _ = self._x(x)
        onehot = np.eye(self.num_classes)[np.atleast_1d(labels)]
        return self._grad("ce", x, onehot=onehot)

    def logit_grad(self, x, coef):
        """Input gradient of sum_i <coef_i, f(x_i)>."""
        coef = np.atleast_2d(coef)
        return self._grad("lin", x, coef=coef)[1]

    def feature_grad(self, x, coef):
        """Input gradient of sum_i <coef_i, phi(x_i)>, i.e. J^T coef."""
        coef = np.atleast_2d(coef)
        return self._grad("phidot", x, phicoef=coef)[1]

    def param_grad(self, x, labels):
        xb, _ = self._x(x)
        onehot = np.eye(self.num_classes)[labels]
        names = sorted(self.params)
        val, g = gradient(self.graph, "ce", {"x": xb, **self.params, "onehot": onehot}, names, return_value=True)
        return val, g

    def astype(self, dtype):
        return Classifier(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def replace(self, params):
        return Classifier(self.arch, params)

    def checksum(self):
        h = hashlib.sha256(_arch_key(self.arch).encode())
        for k in sorted(self.params):
            v = np.ascontiguousarray(self.params[k], dtype="<f8")
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()


def logits(model, x):
    return model.logits(x)


def features(model, x):
    return model.features(x)


def log_odds(model, x, y, z):
    return model.log_odds(x, y, z)


def predict(model, x):
    return model.predict(x)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "rmsprop"
    seed: int = 0
    adversarial: object = None  # AttackSpec for half-clean/half-PGD batches
    rho: float = 0.9
    eps: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size and lr positive")
        if self.optimizer not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def train(model, x, y, cfg):
    """Minibatch training on mean cross-entropy. Returns a new Classifier."""
    from .attacks import pgd_attack

    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty training set")
    if y.max() >= model.num_classes or y.min() < 0:
        raise ValueError("labels out of range")
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    cache = {k: np.zeros_like(v) for k, v in params.items()}
    cur = model
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if cfg.adversarial is not None:
                spec = cfg.adversarial.with_seed(cfg.adversarial.seed + step)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    xa = pgd_attack(cur, xb, spec, label=yb)
                xb = np.concatenate([xb, xa])
                yb = np.concatenate([yb, yb])
            loss, grads = cur.param_grad(xb, yb)
            loss /= len(xb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            for k in params:
                g = grads[k] / len(xb)
                if cfg.optimizer == "rmsprop":
                    cache[k] = cfg.rho * cache[k] + (1 - cfg.rho) * g * g
                    params[k] -= cfg.lr * g / (np.sqrt(cache[k]) + cfg.eps)
                else:
                    cache[k] = cfg.momentum * cache[k] + g
                    params[k] -= cfg.lr * cache[k]
            cur = model.replace(params)
            step += 1
    return cur if cfg.epochs > 0 else model
