"""Minimal reverse-mode autodiff over numpy arrays.

Only what the world model and the actor-critic need: dense layers, a gated
recurrent cell, diagonal Gaussians with closed-form KL, stop-gradient and an
Adam optimiser with global-norm clipping. Everything is float64.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or parameter update is not finite."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(value)
    return Tensor(value, parents, backward_fn, True)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _node(a.value + b.value, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _node(a.value - b.value, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)
    return _node(a.value * b.value, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))
    return _node(out, (a, b), bw)


def square(a):
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    # exact 0/1 at saturation, no overflow warnings
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.value)
    return _node(out, (a,), lambda g: (g * _sigmoid(a.value),))


def stop_gradient(a):
    """Same value, no gradient path."""
    return Tensor(as_tensor(a).value)


# ------------------------------------------------------------------ structural

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ b.value.T
        if a.value.ndim == 1:
            gb = np.outer(a.value, g)
        else:
            gb = a.value.T @ g
        return ga, gb
    return _node(a.value @ b.value, (a, b), bw)


def linear(x, w, b, relu_out=False):
    """Fused ``x @ w + b`` (optionally followed by ReLU) over a 2-D batch."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = x.value @ w.value + b.value
    if relu_out:
        mask = out > 0
        out = out * mask

    def bw(g):
        if relu_out:
            g = g * mask
        return (g @ w.value.T if x.requires_grad else None,
                x.value.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)
    return _node(out, (x, w, b), bw)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in ts], axis=axis)
    sizes = np.cumsum([t.value.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _node(out, tuple(ts), bw)


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.value)
        full[idx] += g
        return (full,)
    return _node(a.value[idx], (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def log_softmax(a, offset=None):
    """Log-softmax along the last axis of ``a + offset`` (``offset`` is a constant array)."""
    a = as_tensor(a)
    x = a.value if offset is None else a.value + offset
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)
    return _node(out, (a,), bw)


# ------------------------------------------------------------------- backward

def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    if seed is None:
        if loss.value.size != 1:
            raise ValueError("backward() needs a scalar loss or an explicit seed")
        seed = np.ones_like(loss.value)
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -------------------------------------------------------------- parameters

class ParamStore:
    """Named parameter arrays plus Adam moments."""

    def __init__(self, params=None, beta1=0.9, beta2=0.999, eps=1e-4):
        self.params = OrderedDict()
        self.m = {}
        self.v = {}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name, arr):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} is not finite")
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    @property
    def size(self) -> int:
        return int(np.sum([a.size for a in self.params.values()]))

    def leaves(self) -> dict:
        """Trainable leaf tensors, one per parameter."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def constants(self) -> dict:
        """Frozen views: values flow forward, gradients are dropped."""
        return {k: Tensor(v) for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        new = ParamStore(beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        for k, arr in self.params.items():
            new.params[k] = arr.copy()
            new.m[k] = self.m[k].copy()
            new.v[k] = self.v[k].copy()
        new.t = self.t
        return new

    def state_dict(self) -> dict:
        out = {}
        for k in self.params:
            out[f"param/{k}"] = self.params[k]
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        out["adam_t"] = np.array(self.t)
        return out

    def load_state_dict(self, state: dict) -> None:
        names = [k[len("param/"):] for k in state if k.startswith("param/")]
        if set(names) != set(self.params):
            raise KeyError("parameter names do not match the store layout")
        for k in self.params:
            if state[f"param/{k}"].shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k!r}")
            self.params[k] = np.array(state[f"param/{k}"], dtype=np.float64)
            self.m[k] = np.array(state[f"adam_m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"adam_v/{k}"], dtype=np.float64)
        self.t = int(state["adam_t"])

    def apply_gradients(self, grads: dict, lr: float, clip_norm: float) -> float:
        """Clip by global norm then take one Adam step. Returns the raw grad norm."""
        g = {k: (grads.get(k) if grads.get(k) is not None else np.zeros_like(v))
             for k, v in self.params.items()}
        sq = 0.0
        for arr in g.values():
            sq += float(np.sum(arr * arr))
        norm = np.sqrt(sq)
        if not np.isfinite(norm):
            raise NonFiniteError("gradient norm is not finite")
        if clip_norm <= 0:
            return norm
        scale = min(1.0, clip_norm / (norm + 1e-12))
        t = self.t + 1
        b1, b2 = self.beta1, self.beta2
        new_p, new_m, new_v = {}, {}, {}
        for k, p in self.params.items():
            gk = g[k] * scale
            m = b1 * self.m[k] + (1 - b1) * gk
            v = b2 * self.v[k] + (1 - b2) * gk * gk
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            upd = p - lr * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(upd)):
                raise NonFiniteError(f"update of {k!r} is not finite")
            new_p[k], new_m[k], new_v[k] = upd, m, v
        self.params.update(new_p)
        self.m.update(new_m)
        self.v.update(new_v)
        self.t = t
        return norm


def backward_and_step(store: ParamStore, loss: Tensor, leaves: dict, lr: float,
                      clip_norm: float = 100.0) -> float:
    """Backpropagate ``loss`` into ``leaves`` (from ``store.leaves()``) and update ``store``."""
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteError(f"loss is not finite: {loss.value}")
    for leaf in leaves.values():
        leaf.grad = None
    backward(loss)
    return store.apply_gradients({k: t.grad for k, t in leaves.items()}, lr, clip_norm)


def gradients(loss: Tensor, leaves: dict) -> dict:
    """Gradients of a scalar loss w.r.t. ``leaves``; unreachable leaves get zeros."""
    for leaf in leaves.values():
        leaf.grad = None
    backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for k, t in leaves.items()}


# --------------------------------------------------------------------- layers

def init_linear(store: ParamStore, rng, name: str, n_in: int, n_out: int, scale=1.0):
    limit = scale * np.sqrt(6.0 / (n_in + n_out))
    store.add(f"{name}.w", rng.uniform(-limit, limit, size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def init_mlp(store: ParamStore, rng, name: str, sizes, out_scale=1.0):
    """Dense stack ``sizes[0] -> ... -> sizes[-1]`` stored as ``name.l{i}``."""
    sizes = tuple(int(s) for s in sizes)
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        init_linear(store, rng, f"{name}.l{i}", sizes[i], sizes[i + 1],
                    scale=out_scale if last else 1.0)
    return sizes


def mlp_forward(P: dict, name: str, sizes, x, activation=relu):
    """ReLU between layers, linear output."""
    x = as_tensor(x)
    if x.shape[-1] != sizes[0]:
        raise ValueError(f"{name}: expected input width {sizes[0]}, got {x.shape[-1]}")
    n = len(sizes) - 1
    fused = activation is relu and x.value.ndim == 2
    for i in range(n):
        w, b = P[f"{name}.l{i}.w"], P[f"{name}.l{i}.b"]
        if w.shape != (sizes[i], sizes[i + 1]):
            raise ValueError(f"{name}.l{i}: weight shape {w.shape} does not match layer spec")
        hidden = i < n - 1
        if fused:
            x = linear(x, w, b, relu_out=hidden)
        else:
            x = add(matmul(x, w), b)
            if hidden:
                x = activation(x)
    return x


def init_gru(store: ParamStore, rng, name: str, n_in: int, n_hidden: int):
    lx = np.sqrt(6.0 / (n_in + n_hidden))
    lh = np.sqrt(6.0 / (2 * n_hidden))
    store.add(f"{name}.wx", rng.uniform(-lx, lx, size=(n_in, 3 * n_hidden)))
    store.add(f"{name}.b", np.zeros(3 * n_hidden))
    store.add(f"{name}.uru", rng.uniform(-lh, lh, size=(n_hidden, 2 * n_hidden)))
    store.add(f"{name}.uc", rng.uniform(-lh, lh, size=(n_hidden, n_hidden)))


def recurrent_cell(P: dict, name: str, h_prev, x):
    """GRU step: reset/update gates, tanh candidate, ``h' = (1-u) h + u c``.

    One graph node with a hand-written backward; ``recurrent_cell_reference``
    builds the same function from primitive ops.
    """
    h_prev, x = as_tensor(h_prev), as_tensor(x)
    wx, b = P[f"{name}.wx"], P[f"{name}.b"]
    uru, uc = P[f"{name}.uru"], P[f"{name}.uc"]
    H = uc.shape[0]
    if h_prev.shape[-1] != H or x.shape[-1] != wx.shape[0]:
        raise ValueError(f"{name}: dimension mismatch (h {h_prev.shape}, x {x.shape})")
    hv, xv = h_prev.value, x.value
    xw = xv @ wx.value + b.value
    hu = hv @ uru.value
    r = _sigmoid(xw[..., :H] + hu[..., :H])
    u = _sigmoid(xw[..., H:2 * H] + hu[..., H:])
    rh = r * hv
    c = np.tanh(xw[..., 2 * H:] + rh @ uc.value)
    out = hv + u * (c - hv)

    def bw(g):
        dc_pre = g * u * (1.0 - c * c)
        du_pre = g * (c - hv) * u * (1.0 - u)
        d_rh = dc_pre @ uc.value.T
        dr_pre = d_rh * hv * r * (1.0 - r)
        dxw = np.concatenate([dr_pre, du_pre, dc_pre], axis=-1)
        dhu = np.concatenate([dr_pre, du_pre], axis=-1)
        dh = g * (1.0 - u) + d_rh * r + dhu @ uru.value.T
        dx = dxw @ wx.value.T if x.requires_grad else None
        return (dh, dx,
                _mat_grad(xv, dxw) if wx.requires_grad else None,
                _unbroadcast(dxw, b.shape) if b.requires_grad else None,
                _mat_grad(hv, dhu) if uru.requires_grad else None,
                _mat_grad(rh, dc_pre) if uc.requires_grad else None)
    return _node(out, (h_prev, x, wx, b, uru, uc), bw)


def _mat_grad(a, g):
    if a.ndim == 1:
        return np.outer(a, g)
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def recurrent_cell_reference(P: dict, name: str, h_prev, x):
    """Composed-primitive version of ``recurrent_cell`` (slower, same maths)."""
    h_prev, x = as_tensor(h_prev), as_tensor(x)
    wx, b = P[f"{name}.wx"], P[f"{name}.b"]
    uru, uc = P[f"{name}.uru"], P[f"{name}.uc"]
    H = uc.shape[0]
    xw = add(matmul(x, wx), b)
    hu = matmul(h_prev, uru)
    r = sigmoid(add(xw[..., :H], hu[..., :H]))
    u = sigmoid(add(xw[..., H:2 * H], hu[..., H:]))
    c = tanh(add(xw[..., 2 * H:], matmul(mul(r, h_prev), uc)))
    return add(h_prev, mul(u, sub(c, h_prev)))


# ---------------------------------------------------------------- Gaussians

@dataclass
class DiagGaussian:
    mean: Tensor
    std: Tensor

    @classmethod
    def from_raw(cls, raw, size: int, floor: float = 1e-3) -> "DiagGaussian":
        """Split ``raw`` into (mean, pre-std); std = softplus(pre-std) + floor."""
        raw = as_tensor(raw)
        pre = raw.value[..., size:]
        std = np.logaddexp(0.0, pre) + floor

        def bw(g):
            full = np.zeros_like(raw.value)
            full[..., size:] = g * _sigmoid(pre)
            return (full,)
        return cls(raw[..., :size], _node(std, (raw,), bw))

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(stop_gradient(self.mean), stop_gradient(self.std))


def gaussian_sample_reparam(d: DiagGaussian, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != d.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != mean shape {d.mean.shape}")
    return _node(d.mean.value + d.std.value * noise, (d.mean, d.std),
                 lambda g: (g, g * noise))


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian):
    """KL(q || p) summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ValueError("KL between Gaussians of different dimension")
    if np.any(q.std.value <= 0) or np.any(p.std.value <= 0):
        raise ValueError("standard deviations must be strictly positive")
    var_ratio = square(div(q.std, p.std))
    mahal = square(div(sub(q.mean, p.mean), p.std))
    term = sub(add(var_ratio, mahal), add(log(var_ratio), 1.0))
    return mul(sum(term, axis=-1), 0.5)
