"""A small reverse-mode autodiff tape over float64 numpy arrays.

Only what the toy emotion model needs: broadcasting arithmetic, batched
matmul, a handful of activations, softmax, layer norm, single-head
self-attention, a tanh RNN cell and Adam. Every op records a closure that
pushes its output gradient back to its inputs; ``Tensor.backward`` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, parents: tuple = (), backward: Optional[Callable] = None,
                 requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}{', grad' if self.requires_grad else ''})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operators
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))
    out._backward = lambda g: (a._accum(g), b._accum(g))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b))
    out._backward = lambda g: (a._accum(g), b._accum(-g))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))
    out._backward = lambda g: (a._accum(g * b.data), b._accum(g * a.data))
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, (a, b))
    out._backward = lambda g: (a._accum(g / b.data), b._accum(-g * a.data / (b.data * b.data)))
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = Tensor(np.matmul(a.data, b.data), (a, b))

    def back(g):
        # promote 1-D operands the way np.matmul does, then drop the added axes
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            a._accum(ga[..., 0, :] if a.ndim == 1 else ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            b._accum(gb[..., :, 0] if b.ndim == 1 else gb)
    out._backward = back
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))
    out._backward = back
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,))
    out._backward = lambda g: a._accum(g.reshape(a.data.shape))
    return out


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, i, j), (a,))
    out._backward = lambda g: a._accum(np.swapaxes(g, i, j))
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), tuple(ts))
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def back(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            t._accum(part)
    out._backward = back
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis), tuple(ts))

    def back(g):
        for k, t in enumerate(ts):
            t._accum(np.take(g, k, axis=axis))
    out._backward = back
    return out


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[idx], (a,))

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)
    out._backward = back
    return out


def _unary(a, value: np.ndarray, dfn) -> Tensor:
    a = as_tensor(a)
    out = Tensor(value, (a,))
    out._backward = lambda g: a._accum(g * dfn())
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _unary(a, y, lambda: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _unary(a, y, lambda: y * (1.0 - y))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _unary(a, y, lambda: y)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data)
    return _unary(a, y, lambda: 0.5 * (1.0 + np.tanh(0.5 * a.data)))


def log_sigmoid(a) -> Tensor:
    return -softplus(-as_tensor(a))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation, smooth everywhere."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def d():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
    return _unary(a, y, d)


def floor_at(a, eps: float) -> Tensor:
    """max(a, eps); gradient flows only where a > eps."""
    a = as_tensor(a)
    keep = a.data > eps
    # np.maximum keeps NaN visible to the finiteness check
    return _unary(a, np.maximum(a.data, eps), lambda: keep.astype(np.float64))


def l2norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis))
    out = Tensor(n, (a,))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        a._accum(a.data * np.expand_dims(scale, axis))
    out._backward = back
    return out


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = v.data - np.max(v.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y, (v,))

    def back(g):
        v._accum(y * (g - np.sum(g * y, axis=axis, keepdims=True)))
    out._backward = back
    return out


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = v.data - np.max(v.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y, (v,))

    def back(g):
        v._accum(g - np.exp(y) * np.sum(g, axis=axis, keepdims=True))
    out._backward = back
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def back(g):
        gamma._accum(g * xhat)
        beta._accum(g)
        if x.requires_grad:
            gx = g * gamma.data
            n = x.data.shape[-1]
            x._accum(inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True)))
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# layers


def dense(x, W, b=None) -> Tensor:
    """y = x W + b."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    y = matmul(x, W)
    return y if b is None else add(y, b)


def attention_block(X, p: Dict[str, Tensor], prefix: str = "", key_mask=None) -> Tensor:
    """Pre-norm transformer block: single-head self-attention then a 2-layer MLP.

    ``X`` is (m, E) or (B, m, E). ``key_mask`` (same leading shape as ``X``
    minus E) marks real positions with 1; padded keys get no attention.
    """
    X = as_tensor(X)
    E = X.shape[-1]
    if p[prefix + "Wq"].shape[0] != E:
        raise ShapeError(f"attention block expects width {p[prefix + 'Wq'].shape[0]}, got {E}")
    h = layer_norm(X, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    q = matmul(h, p[prefix + "Wq"])
    k = matmul(h, p[prefix + "Wk"])
    v = matmul(h, p[prefix + "Wv"])
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(E))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask)[..., None, :] > 0, 0.0, -1e9)
        scores = scores + bias
    att = softmax(scores, axis=-1)
    X = X + dense(matmul(att, v), p[prefix + "Wo"], p[prefix + "bo"])
    h2 = layer_norm(X, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
    return X + dense(gelu(dense(h2, p[prefix + "W1"], p[prefix + "c1"])), p[prefix + "W2"], p[prefix + "c2"])


def attention_weights(X, p: Dict[str, Tensor], prefix: str = "", key_mask=None) -> np.ndarray:
    X = as_tensor(X)
    h = layer_norm(X, p[prefix + "ln1_g"], p[prefix + "ln1_b"]).data
    q, k = h @ p[prefix + "Wq"].data, h @ p[prefix + "Wk"].data
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(X.shape[-1])
    if key_mask is not None:
        s = s + np.where(np.asarray(key_mask)[..., None, :] > 0, 0.0, -1e9)
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def rnn_step(h, x, Wh, Wx, b) -> Tensor:
    """h' = tanh(h Wh + x Wx + b)."""
    h, x = as_tensor(h), as_tensor(x)
    if h.shape[-1] != as_tensor(Wh).shape[0] or x.shape[-1] != as_tensor(Wx).shape[0]:
        raise ShapeError("rnn_step: state/input widths do not match the weights")
    return tanh(matmul(h, Wh) + matmul(x, Wx) + b)


# ---------------------------------------------------------------------------
# parameters and optimisation


def init_attention_block(store: "ParamStore", rng, prefix: str, E: int, hidden: int) -> None:
    for n in ("Wq", "Wk", "Wv", "Wo"):
        store.glorot(prefix + n, (E, E), rng)
    store.zeros(prefix + "bo", (E,))
    store.ones(prefix + "ln1_g", (E,))
    store.zeros(prefix + "ln1_b", (E,))
    store.ones(prefix + "ln2_g", (E,))
    store.zeros(prefix + "ln2_b", (E,))
    store.glorot(prefix + "W1", (E, hidden), rng)
    store.zeros(prefix + "c1", (hidden,))
    store.glorot(prefix + "W2", (hidden, E), rng)
    store.zeros(prefix + "c2", (E,))


class ParamStore:
    """Named parameters with matching Adam moments and a step counter."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def glorot(self, name, shape, rng):
        lim = math.sqrt(6.0 / (shape[0] + shape[-1]))
        return self.add(name, rng.uniform(-lim, lim, shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape))

    def tensors(self) -> Dict[str, Tensor]:
        """Fresh leaf tensors sharing the parameter arrays, for one forward pass."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ParamStore":
        s = ParamStore()
        s.params = {k: v.copy() for k, v in self.params.items()}
        s.m = {k: v.copy() for k, v in self.m.items()}
        s.v = {k: v.copy() for k, v in self.v.items()}
        s.step = self.step
        return s

    # checkpoint: named tensors as shape + row-major values; repr floats round-trip exactly
    def to_record(self) -> dict:
        def pack(d):
            return {k: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]} for k, v in sorted(d.items())}
        return {"step": self.step, "params": pack(self.params), "m": pack(self.m), "v": pack(self.v)}

    @classmethod
    def from_record(cls, rec: dict) -> "ParamStore":
        def unpack(d):
            return {k: np.array(x["values"], dtype=np.float64).reshape(x["shape"]) for k, x in d.items()}
        s = cls()
        s.params, s.m, s.v = unpack(rec["params"]), unpack(rec["m"]), unpack(rec["v"])
        s.step = int(rec["step"])
        return s

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_record(json.loads(Path(path).read_text(encoding="utf-8")))


def grads_of(tensors: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: t.grad for k, t in tensors.items() if t.grad is not None}


def adam_update(store: ParamStore, grads: Dict[str, np.ndarray], lr: float = 1e-3,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam step over the parameters named in ``grads``."""
    for k, g in grads.items():
        if g.shape != store.params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {store.params[k].shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in sorted(grads):
        g = grads[k]
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
