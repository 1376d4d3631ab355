"""Small reverse-mode autodiff core on float64 numpy arrays.

Every op builds a node holding its parents and a backward closure; ``Tensor.backward``
walks the graph in reverse topological order. Only first derivatives are supported.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class DegenerateNormalizationError(ValueError):
    pass


class InvalidTemperatureError(ValueError):
    pass


class IncompleteBackwardError(RuntimeError):
    pass


class DeterminismError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basic views -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        return self.data

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- graph -------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation/decoding)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data, parents, backward):
    if not _GRAD_ENABLED:
        return Tensor(data)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a):
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation of GELU (smooth, so finite differences behave)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward)


# -- shape ops ------------------------------------------------------------------


def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=()):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, idx):
    """Indexing / gathering. Gradient scatters back with accumulation."""
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, backward)


# -- reductions -------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def affine(x, weight, bias):
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"affine shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data + bias.data).reshape(x.shape[:-1] + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (
            (g2 @ weight.data.T).reshape(x.shape),
            x2.T @ g2,
            g2.sum(axis=0),
        )

    return _node(out, (x, weight, bias), backward)


# -- normalisation and softmax ------------------------------------------------------


def layer_norm(x, gain, bias, epsilon=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise DegenerateNormalizationError(f"layer_norm needs at least 2 features, got {d}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gain, bias), backward)


def _check_temperature(temperature):
    if not temperature > 0 or not math.isfinite(temperature):
        raise InvalidTemperatureError(f"temperature must be positive, got {temperature}")


def softmax_with_temperature(logits, temperature=1.0):
    _check_temperature(temperature)
    logits = as_tensor(logits)
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / temperature,)

    return _node(p, (logits,), backward)


def softmax(logits):
    return softmax_with_temperature(logits, 1.0)


def log_softmax(logits, temperature=1.0):
    _check_temperature(temperature)
    logits = as_tensor(logits)
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _node(out, (logits,), backward)


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-likelihood of ``targets`` over non-ignored positions."""
    logits = as_tensor(logits)
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} positions but {t.shape[0]} targets")
    valid = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    tv = t[valid]
    if np.any((tv < 0) | (tv >= V)):
        raise IndexError(f"cross_entropy target out of range [0, {V})")
    n = int(valid.sum())
    if n == 0:
        return _node(np.float64(0.0), (logits,), lambda g: (np.zeros_like(logits.data),))
    z = flat[valid]
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), tv]
    loss = nll.mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tv] -= 1.0
        full = np.zeros_like(flat)
        full[valid] = p * (g / n)
        return (full.reshape(logits.shape),)

    return _node(np.float64(loss), (logits,), backward)


# -- parameters and optimisation -----------------------------------------------------


class ParameterSet:
    """Named trainable tensors plus a freeze mask."""

    def __init__(self, params=None):
        self.params = {}
        self.frozen = set()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def freeze(self, *names):
        for n in names:
            if n not in self.params:
                raise KeyError(n)
            self.frozen.add(n)
            self.params[n].requires_grad = False
            self.params[n].grad = None

    def unfreeze(self, *names):
        self.frozen.difference_update(names)
        for n in names:
            self.params[n].requires_grad = True

    def trainable(self):
        return {n: p for n, p in self.params.items() if n not in self.frozen}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load(self, arrays):
        for n, arr in arrays.items():
            if self.params[n].data.shape != np.shape(arr):
                raise DimensionError(f"{n}: shape {np.shape(arr)} != {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def num_values(self):
        return sum(p.data.size for p in self.params.values())


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    _names: list = field(default=None, repr=False)
    _m: np.ndarray = field(default=None, repr=False)
    _v: np.ndarray = field(default=None, repr=False)
    _offsets: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup fraction must lie in [0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    @property
    def warmup_steps(self):
        return max(1, round(self.warmup_fraction * self.total_steps)) if self.warmup_fraction > 0 else 0

    def lr_at(self, step):
        """Learning rate used by the ``step``-th update (1-indexed): linear warmup, then constant."""
        w = self.warmup_steps
        if w and step < w:
            return self.lr * step / w
        return self.lr


def adamw_step(params: ParameterSet, state: OptimizerState):
    """One decoupled-weight-decay Adam update of every unfrozen parameter."""
    trainable = params.trainable()
    missing = [n for n, p in trainable.items() if p.grad is None]
    if missing:
        raise IncompleteBackwardError(f"no gradient for unfrozen parameters: {missing}")
    names = list(trainable)
    if names != state._names:
        # (re)build flat moment buffers, keeping moments of parameters seen before
        sizes = [trainable[n].data.size for n in names]
        state._m = np.concatenate([state.m.get(n, np.zeros(k)).ravel() for n, k in zip(names, sizes)]) if names else np.zeros(0)
        state._v = np.concatenate([state.v.get(n, np.zeros(k)).ravel() for n, k in zip(names, sizes)]) if names else np.zeros(0)
        state._names = names
        state._offsets = np.cumsum([0] + sizes)
    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    g = np.concatenate([trainable[n].grad.ravel() for n in names]) if names else np.zeros(0)
    x = np.concatenate([trainable[n].data.ravel() for n in names]) if names else np.zeros(0)
    state._m = state.beta1 * state._m + (1.0 - state.beta1) * g
    state._v = state.beta2 * state._v + (1.0 - state.beta2) * g * g
    x = x * (1.0 - lr * state.weight_decay) - lr * (state._m / bc1) / (np.sqrt(state._v / bc2) + state.eps)
    off = state._offsets
    for i, n in enumerate(names):
        shape = trainable[n].data.shape
        trainable[n].data = x[off[i]:off[i + 1]].reshape(shape)
        state.m[n] = state._m[off[i]:off[i + 1]].reshape(shape)
        state.v[n] = state._v[off[i]:off[i + 1]].reshape(shape)
    return params, state


@dataclass
class ProbeResult:
    name: str
    index: tuple
    analytic: float
    numeric: float
    error: float


def finite_difference_probes(loss_fn, params: ParameterSet, probes=32, step=1e-5, seed=0, names=None,
                             step_scale=None):
    """Analytic vs central-difference gradient at ``probes`` random coordinates.

    ``loss_fn()`` must return a scalar Tensor built from ``params``. Coordinates are drawn
    with probability proportional to size over the selected (default: unfrozen) parameters.
    ``step_scale`` maps a parameter name to a factor on ``step``: a parameter that only enters
    through ``p / t`` is probed with step ``step * t``, i.e. at unit scale in its own coordinate.
    """
    step_scale = step_scale or {}
    first = loss_fn()
    again = loss_fn()
    if first.data.tobytes() != again.data.tobytes():
        raise DeterminismError("loss_fn gave different values for identical parameters")
    params.zero_grad()
    first.backward()
    names = list(names) if names is not None else list(params.trainable())
    sizes = np.array([params[n].data.size for n in names])
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(probes):
        k = rng.choice(len(names), p=sizes / sizes.sum())
        p = params[names[k]]
        flat_idx = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat_idx, p.data.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        h = step * step_scale.get(names[k], 1.0)
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = loss_fn().item()
        p.data[idx] = orig - h
        down = loss_fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        out.append(ProbeResult(names[k], tuple(int(i) for i in idx), analytic, numeric, err))
    return out


def finite_difference_check(loss_fn, params: ParameterSet, probes=32, step=1e-5, seed=0, names=None,
                            step_scale=None):
    """Worst relative error between analytic and central-difference gradients."""
    return max(r.error for r in finite_difference_probes(loss_fn, params, probes, step, seed, names, step_scale))


def check_finite(t: Tensor, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t
