"""Static computation graphs over numpy arrays with reverse-mode gradients.

A graph is built once from named inputs and a small set of primitives,
then evaluated on bindings. Every declared shape may carry ``None`` as its
leading dimension, which stands for a free batch size.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Shape mismatch, reported with the offending node name."""

    def __init__(self, node, msg):
        self.node = node
        super().__init__(f"node '{node}': {msg}")


class UnboundInputError(KeyError):
    pass


class NonScalarOutputError(ValueError):
    pass


class Node:
    __slots__ = ("graph", "op", "inputs", "attrs", "shape", "name")

    def __init__(self, graph, op, inputs, attrs, shape, name):
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.shape = shape
        self.name = name

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __repr__(self):
        return f"Node({self.name}, {self.op}, shape={self.shape})"


def _dims_match(a, b):
    return len(a) == len(b) and all(x is None or y is None or x == y for x, y in zip(a, b))


class Graph:
    """Directed acyclic graph of array operations.

    >>> g = Graph()
    >>> x = g.input("x", (None, 3))
    >>> g.output("s", g.sum(g.relu(x)))
    """

    def __init__(self):
        self.nodes = []
        self.inputs = {}
        self.outputs = {}

    def _add(self, op, inputs, shape, attrs=None, name=None):
        name = name or f"{op}_{len(self.nodes)}"
        node = Node(self, op, tuple(inputs), attrs or {}, tuple(shape), name)
        self.nodes.append(node)
        return node

    # leaves
    def input(self, name, shape):
        if name in self.inputs:
            raise ValueError(f"duplicate input '{name}'")
        node = self._add("input", (), shape, name=name)
        self.inputs[name] = node
        return node

    def const(self, value, name=None):
        value = np.array(value, dtype=float)
        value.setflags(write=False)
        return self._add("const", (), value.shape, {"value": value}, name)

    def output(self, name, node):
        self.outputs[name] = node
        return node

    # elementwise
    def _binary(self, op, a, b):
        if isinstance(b, (int, float)):
            b = self.const(b)
        if _dims_match(a.shape, b.shape) or b.shape == () or (
                len(b.shape) < len(a.shape) and _dims_match(a.shape[len(a.shape) - len(b.shape):], b.shape)):
            return self._add(op, (a, b), a.shape)
        raise ShapeError(f"{op}_{len(self.nodes)}", f"cannot combine {a.shape} with {b.shape}")

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def scale(self, a, c):
        return self._add("scale", (a,), a.shape, {"c": float(c)})

    def square(self, a):
        return self._add("square", (a,), a.shape)

    def relu(self, a):
        return self._add("relu", (a,), a.shape)

    # dense algebra
    def matmul(self, a, w):
        """a (..., m) times a 2-D matrix w (m, n)."""
        if len(w.shape) != 2 or not _dims_match(a.shape[-1:], w.shape[:1]):
            raise ShapeError(f"matmul_{len(self.nodes)}", f"inner dims differ: {a.shape} @ {w.shape}")
        return self._add("matmul", (a, w), a.shape[:-1] + w.shape[1:])

    def dot(self, a, b):
        """Inner product along the last axis."""
        if not _dims_match(a.shape, b.shape) and not _dims_match(a.shape[-1:], b.shape):
            raise ShapeError(f"dot_{len(self.nodes)}", f"cannot contract {a.shape} with {b.shape}")
        return self._add("dot", (a, b), a.shape[:-1])

    def append_one(self, a):
        """Concatenate a constant 1 to the last axis."""
        last = None if a.shape[-1] is None else a.shape[-1] + 1
        return self._add("append_one", (a,), a.shape[:-1] + (last,))

    def softmax(self, a):
        return self._add("softmax", (a,), a.shape)

    def logsumexp(self, a):
        return self._add("logsumexp", (a,), a.shape[:-1])

    def sum(self, a, axis=None):
        if axis is None:
            return self._add("sum", (a,), (), {"axis": None})
        axis = axis % len(a.shape)
        return self._add("sum", (a,), a.shape[:axis] + a.shape[axis + 1:], {"axis": axis})

    def mean(self, a):
        return self._add("mean", (a,), ())

    def flatten(self, a):
        """Collapse all but the leading batch axis."""
        rest = a.shape[1:]
        n = None if any(d is None for d in rest) else int(np.prod(rest))
        return self._add("flatten", (a,), (a.shape[0], n))

    # convolutional
    def conv2d(self, x, w, b=None):
        """Valid 2-D cross-correlation, stride 1. x (B,C,H,W), w (O,C,kh,kw)."""
        if len(x.shape) != 4 or len(w.shape) != 4 or not _dims_match(x.shape[1:2], w.shape[1:2]):
            raise ShapeError(f"conv2d_{len(self.nodes)}", f"bad shapes {x.shape} * {w.shape}")
        _, _, h, wd = x.shape
        kh, kw = w.shape[2:]
        shape = (x.shape[0], w.shape[0], h - kh + 1, wd - kw + 1)
        out = self._add("conv2d", (x, w), shape)
        if b is not None:
            out = self._add("chanbias", (out, b), shape)
        return out

    def maxpool2d(self, x):
        """2x2 max pooling with stride 2 (odd trailing rows/cols dropped)."""
        b, c, h, w = x.shape
        return self._add("maxpool2d", (x,), (b, c, h // 2, w // 2))


# forward rules

def _fwd(node, v):
    op, a = node.op, node.attrs
    if op == "add":
        return v[0] + v[1]
    if op == "sub":
        return v[0] - v[1]
    if op == "mul":
        return v[0] * v[1]
    if op == "scale":
        return a["c"] * v[0]
    if op == "square":
        return v[0] * v[0]
    if op == "relu":
        return np.maximum(v[0], 0.0)
    if op == "matmul":
        return v[0] @ v[1]
    if op == "dot":
        return np.sum(v[0] * v[1], axis=-1)
    if op == "append_one":
        ones = np.ones(v[0].shape[:-1] + (1,), dtype=v[0].dtype)
        return np.concatenate([v[0], ones], axis=-1)
    if op == "softmax":
        e = np.exp(v[0] - v[0].max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    if op == "logsumexp":
        m = v[0].max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(v[0] - m).sum(axis=-1, keepdims=True)))[..., 0]
    if op == "sum":
        return np.sum(v[0], axis=a["axis"])
    if op == "mean":
        return np.mean(v[0])
    if op == "flatten":
        return v[0].reshape(v[0].shape[0], -1)
    if op == "conv2d":
        win = sliding_window_view(v[0], v[1].shape[2:], axis=(2, 3))
        return np.einsum("bchwij,ocij->bohw", win, v[1], optimize=True)
    if op == "chanbias":
        return v[0] + v[1][None, :, None, None]
    if op == "maxpool2d":
        x = v[0]
        b, c, h, w = x.shape
        x = x[:, :, :h // 2 * 2, :w // 2 * 2].reshape(b, c, h // 2, 2, w // 2, 2)
        return x.max(axis=(3, 5))
    raise NotImplementedError(op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    return g.reshape(shape)


def _vjp(node, v, out, g):
    op, a = node.op, node.attrs
    if op == "add":
        return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)
    if op == "sub":
        return _unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)
    if op == "mul":
        return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)
    if op == "scale":
        return (a["c"] * g,)
    if op == "square":
        return (2.0 * v[0] * g,)
    if op == "relu":
        return (g * (v[0] > 0),)
    if op == "matmul":
        x, w = v
        gx = g @ w.T
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw
    if op == "dot":
        ge = g[..., None]
        return _unbroadcast(ge * v[1], v[0].shape), _unbroadcast(ge * v[0], v[1].shape)
    if op == "append_one":
        return (g[..., :-1],)
    if op == "softmax":
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)
    if op == "logsumexp":
        e = np.exp(v[0] - out[..., None])
        return (g[..., None] * e,)
    if op == "sum":
        if a["axis"] is None:
            return (np.full(v[0].shape, g, dtype=float),)
        return (np.broadcast_to(np.expand_dims(g, a["axis"]), v[0].shape).copy(),)
    if op == "mean":
        return (np.full(v[0].shape, g / v[0].size, dtype=float),)
    if op == "flatten":
        return (g.reshape(v[0].shape),)
    if op == "conv2d":
        x, w = v
        kh, kw = w.shape[2:]
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gx = np.einsum("bohwij,ocij->bchw", gwin, w[:, :, ::-1, ::-1], optimize=True)
        return gx, gw
    if op == "chanbias":
        return g, g.sum(axis=(0, 2, 3))
    if op == "maxpool2d":
        x = v[0]
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, :h2 * 2, :w2 * 2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, h2, w2, 4)
        pick = np.argmax(blocks, axis=-1)
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, pick[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2 * 2, w2 * 2)
        gx = np.zeros_like(x)
        gx[:, :, :h2 * 2, :w2 * 2] = gb
        return (gx,)
    raise NotImplementedError(op)


def _ancestors(graph, targets):
    need = set()
    stack = list(targets)
    while stack:
        n = stack.pop()
        if id(n) in need:
            continue
        need.add(id(n))
        stack.extend(n.inputs)
    return [n for n in graph.nodes if id(n) in need]


def _forward(graph, bindings, targets):
    order = _ancestors(graph, targets)
    vals = {}
    for node in order:
        if node.op == "input":
            if node.name not in bindings:
                raise UnboundInputError(f"input '{node.name}' is not bound")
            val = np.asarray(bindings[node.name])
            if not _dims_match(val.shape, node.shape):
                raise ShapeError(node.name, f"bound shape {val.shape} does not fit declared {node.shape}")
            vals[id(node)] = val
            continue
        if node.op == "const":
            vals[id(node)] = node.attrs["value"]
            continue
        args = [vals[id(i)] for i in node.inputs]
        try:
            out = _fwd(node, args)
        except ValueError as exc:
            raise ShapeError(node.name, str(exc)) from None
        if not _dims_match(np.shape(out), node.shape):
            raise ShapeError(node.name, f"produced {np.shape(out)}, expected {node.shape}")
        vals[id(node)] = out
    return order, vals


def evaluate(graph, bindings, outputs=None):
    """Forward pass; returns a dict of the requested named outputs."""
    names = list(graph.outputs) if outputs is None else list(outputs)
    targets = [graph.outputs[n] for n in names]
    _, vals = _forward(graph, bindings, targets)
    return {n: np.array(vals[id(t)]) for n, t in zip(names, targets)}


def gradient(graph, output, bindings, wrt, return_value=False):
    """Gradient of a scalar named output with respect to named inputs."""
    root = graph.outputs[output]
    order, vals = _forward(graph, bindings, [root])
    if np.ndim(vals[id(root)]) != 0:
        raise NonScalarOutputError(f"output '{output}' has shape {np.shape(vals[id(root)])}, not scalar")
    grads = {id(root): np.array(1.0)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.inputs:
            if g is not None:
                grads[id(node)] = g
            continue
        parts = _vjp(node, [vals[id(i)] for i in node.inputs], vals[id(node)], g)
        for inp, gi in zip(node.inputs, parts):
            if inp.op == "const":
                continue
            if id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi
    out = {}
    for name in wrt:
        node = graph.inputs[name]
        g = grads.get(id(node))
        out[name] = np.zeros(np.shape(vals.get(id(node), bindings[name])), dtype=float) if g is None else np.asarray(g)
    if return_value:
        return float(vals[id(root)]), out
    return out


def numerical_gradient(graph, output, bindings, name, h=1e-5):
    """Central finite differences of a scalar output with respect to one input."""
    base = {k: np.array(v, dtype=float) for k, v in bindings.items()}
    x = base[name]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = float(evaluate(graph, base, [output])[output])
        x[i] = old - h
        fm = float(evaluate(graph, base, [output])[output])
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
