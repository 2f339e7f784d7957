"""Dense float64 tensors with reverse-mode differentiation.

The graph is built define-by-run: every operation records its parent
tensors and a backward closure, and ``backward`` replays the graph once
in reverse topological order. A fresh forward pass builds a fresh graph,
which keeps parameter freezing and gradient routing simple. Leaf tensors
created with ``requires_grad=True`` accumulate into ``.grad`` across
backward calls, so backpropagating a sum of losses agrees with separate
per-loss passes.

Everything is double precision; the finite-difference checker in
``grad_check`` relies on that.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

LOGIT_EPS = 1e-6

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Inconsistent tensor shapes for an operation."""


class BackwardError(RuntimeError):
    """Misuse of the backward pass (non-scalar loss, double invocation)."""


class NondeterministicFunctionError(RuntimeError):
    """A function handed to grad_check returned different values twice."""


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array, optionally tracked for differentiation.

    ``grad`` is a persistent same-shape accumulator on leaf tensors with
    ``requires_grad=True``. Intermediate tensors expose the gradient of
    the most recent backward pass through ``last_grad``.
    """

    __slots__ = ("values", "requires_grad", "grad", "last_grad",
                 "_parents", "_bwd", "_backward_done")

    def __init__(self, values, requires_grad=False, _parents=(), _bwd=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = _parents if self.requires_grad else ()
        self._bwd = _bwd if self.requires_grad else None
        self.grad = (np.zeros_like(self.values)
                     if self.requires_grad and not _parents else None)
        self.last_grad = None
        self._backward_done = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """A grad-free leaf sharing this tensor's values."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        backward(self)

    # Convenience arithmetic; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def make_tensor(shape, values, requires_grad=False) -> Tensor:
    """Build a tensor from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        n *= s
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size != n:
        raise ShapeError(f"got {arr.size} values for shape {shape} ({n} expected)")
    return Tensor(arr.reshape(shape), requires_grad=requires_grad)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    """Gaussian-initialized trainable leaf."""
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, out_vals, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(out_vals, requires_grad=a.requires_grad or b.requires_grad,
                 _parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, _unbroadcast(da(g), a.values.shape)))
            if b.requires_grad:
                pairs.append((b, _unbroadcast(db(g), b.values.shape)))
            return pairs
        out._bwd = bwd
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.values + b.values, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.values - b.values, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.values * b.values,
                   lambda g: g * b.values, lambda g: g * a.values)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.values / b.values,
                   lambda g: g / b.values,
                   lambda g: -g * a.values / (b.values * b.values))


def scale(t: Tensor, s: float) -> Tensor:
    t = _as_tensor(t)
    s = float(s)
    out = Tensor(t.values * s, requires_grad=t.requires_grad, _parents=(t,))
    if out.requires_grad:
        out._bwd = lambda g: ((t, g * s),)
    return out


def neg(t: Tensor) -> Tensor:
    return scale(t, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul extents {a.values.shape} x {b.values.shape}")
    out = Tensor(a.values @ b.values,
                 requires_grad=a.requires_grad or b.requires_grad, _parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, g @ b.values.T))
            if b.requires_grad:
                pairs.append((b, a.values.T @ g))
            return pairs
        out._bwd = bwd
    return out


def transpose(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = Tensor(t.values.T, requires_grad=t.requires_grad, _parents=(t,))
    if out.requires_grad:
        out._bwd = lambda g: ((t, g.T),)
    return out


def _unary(t, out_vals, dfn) -> Tensor:
    out = Tensor(out_vals, requires_grad=t.requires_grad, _parents=(t,))
    if out.requires_grad:
        out._bwd = lambda g: ((t, dfn(g)),)
    return out


def relu(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    v = t.values
    # subgradient at exactly 0 is 0
    return _unary(t, np.maximum(v, 0.0), lambda g: g * (v > 0))


def sigmoid(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    v = t.values
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    return _unary(t, y, lambda g: g * y * (1.0 - y))


def exp(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    y = np.exp(t.values)
    return _unary(t, y, lambda g: g * y)


def sin(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    return _unary(t, np.sin(t.values), lambda g: g * np.cos(t.values))


def cos(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    return _unary(t, np.cos(t.values), lambda g: -g * np.sin(t.values))


def absolute(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    return _unary(t, np.abs(t.values), lambda g: g * np.sign(t.values))


def gelu(t: Tensor) -> Tensor:
    """Smooth GELU (tanh form)."""
    t = _as_tensor(t)
    v = t.values
    u = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(u)
    y = 0.5 * v * (1.0 + th)

    def dfn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * du)

    return _unary(t, y, dfn)


def logit_eps(t: Tensor, eps: float = LOGIT_EPS) -> Tensor:
    """Inverse sigmoid after clamping inputs to [eps, 1-eps].

    Outside the clamp region the local gradient is 0 (constant region),
    matching the treatment of other piecewise ops.
    """
    t = _as_tensor(t)
    v = t.values
    c = np.clip(v, eps, 1.0 - eps)
    y = np.log(c) - np.log1p(-c)
    inside = (v >= eps) & (v <= 1.0 - eps)
    return _unary(t, y, lambda g: g * inside / (c * (1.0 - c)))


def clamp_unit(t: Tensor, eps: float = LOGIT_EPS) -> Tensor:
    """Clamp to [eps, 1-eps]; pass-through gradient inside, 0 where clipped."""
    t = _as_tensor(t)
    v = t.values
    y = np.clip(v, eps, 1.0 - eps)
    inside = (v >= eps) & (v <= 1.0 - eps)
    return _unary(t, y, lambda g: g * inside)


def softmax_rows(t: Tensor) -> Tensor:
    """Row softmax with per-row max subtraction."""
    t = _as_tensor(t)
    if t.values.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    z = t.values - t.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def dfn(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _unary(t, y, dfn)


def sum_all(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_vals = np.asarray(t.values.sum())
    return _unary(t, out_vals, lambda g: np.broadcast_to(g, t.values.shape).copy())


def mean_all(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    n = t.values.size
    if n == 0:
        return _unary(t, np.asarray(0.0), lambda g: np.zeros_like(t.values))
    out_vals = np.asarray(t.values.mean())
    return _unary(t, out_vals,
                  lambda g: np.broadcast_to(g / n, t.values.shape).copy())


def row_sum(t: Tensor) -> Tensor:
    """Sum along axis 1, keeping the row axis: (m, n) -> (m, 1)."""
    t = _as_tensor(t)
    if t.values.ndim != 2:
        raise ShapeError("row_sum expects a 2-D tensor")
    out_vals = t.values.sum(axis=1, keepdims=True)
    return _unary(t, out_vals,
                  lambda g: np.broadcast_to(g, t.values.shape).copy())


def l1_loss(pred: Tensor, target: Tensor, weights) -> Tensor:
    """Weighted mean absolute error: sum(w*|p-t|) / max(sum(w), 1).

    ``weights`` must match the prediction shape and be nonnegative; it is
    treated as a constant. The subgradient of |.| at 0 is 0.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    w = weights.values if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if pred.values.shape != target.values.shape or pred.values.shape != w.shape:
        raise ShapeError("l1_loss operands must share one shape")
    diff = pred.values - target.values
    denom = max(float(w.sum()), 1.0)
    out_vals = np.asarray((w * np.abs(diff)).sum() / denom)
    out = Tensor(out_vals,
                 requires_grad=pred.requires_grad or target.requires_grad,
                 _parents=(pred, target))
    if out.requires_grad:
        def bwd(g):
            base = g * w * np.sign(diff) / denom
            pairs = []
            if pred.requires_grad:
                pairs.append((pred, base))
            if target.requires_grad:
                pairs.append((target, -base))
            return pairs
        out._bwd = bwd
    return out


def layer_norm_rows(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learned gain/offset vectors."""
    t, gain, bias = _as_tensor(t), _as_tensor(gain), _as_tensor(bias)
    v = t.values
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    xh = xc / s
    out_vals = xh * gain.values + bias.values
    rg = t.requires_grad or gain.requires_grad or bias.requires_grad
    out = Tensor(out_vals, requires_grad=rg, _parents=(t, gain, bias))
    if out.requires_grad:
        def bwd(g):
            pairs = []
            if gain.requires_grad:
                pairs.append((gain, (g * xh).sum(axis=0)))
            if bias.requires_grad:
                pairs.append((bias, g.sum(axis=0)))
            if t.requires_grad:
                dxh = g * gain.values
                m1 = dxh.mean(axis=1, keepdims=True)
                m2 = (dxh * xh).mean(axis=1, keepdims=True)
                pairs.append((t, (dxh - m1 - xh * m2) / s))
            return pairs
        out._bwd = bwd
    return out


def concat_rows(parts) -> Tensor:
    return _concat(parts, axis=0)


def concat_cols(parts) -> Tensor:
    return _concat(parts, axis=1)


def _concat(parts, axis) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out_vals = np.concatenate([p.values for p in parts], axis=axis)
    rg = any(p.requires_grad for p in parts)
    out = Tensor(out_vals, requires_grad=rg, _parents=tuple(parts))
    if out.requires_grad:
        offsets = np.cumsum([0] + [p.values.shape[axis] for p in parts])

        def bwd(g):
            pairs = []
            for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = (slice(a, b),) if axis == 0 else (slice(None), slice(a, b))
                    pairs.append((p, g[sl]))
            return pairs
        out._bwd = bwd
    return out


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    return _slice(t, start, stop, axis=0)


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    return _slice(t, start, stop, axis=1)


def _slice(t, start, stop, axis) -> Tensor:
    t = _as_tensor(t)
    sl = (slice(start, stop),) if axis == 0 else (slice(None), slice(start, stop))
    out = Tensor(t.values[sl], requires_grad=t.requires_grad, _parents=(t,))
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros_like(t.values)
            buf[sl] = g
            return ((t, buf),)
        out._bwd = bwd
    return out


def reshape(t: Tensor, shape) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    out = Tensor(t.values.reshape(shape), requires_grad=t.requires_grad, _parents=(t,))
    if out.requires_grad:
        out._bwd = lambda g: ((t, g.reshape(t.values.shape)),)
    return out


def take(t: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from a 1-D tensor by an integer index array."""
    t = _as_tensor(t)
    if t.values.ndim != 1:
        raise ShapeError("take expects a 1-D table tensor")
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(t.values[idx], requires_grad=t.requires_grad, _parents=(t,))
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros_like(t.values)
            np.add.at(buf, idx, g)
            return ((t, buf),)
        out._bwd = bwd
    return out


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad leaf.

    Re-invoking backward on the same loss tensor is an error; rebuild the
    graph (rerun the forward pass) instead.
    """
    if loss.values.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise BackwardError("backward already ran for this loss; rebuild the graph")
    loss._backward_done = True
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.get(id(node))
        node.last_grad = g
        if g is None or node._bwd is None:
            continue
        for parent, contrib in node._bwd(g):
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    for node in order:
        if node.grad is not None:
            g = grads.get(id(node))
            if g is not None:
                node.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Parameter bookkeeping


@dataclass
class ParamGroup:
    """A named set of trainable tensors updated (or frozen) together."""

    name: str
    tensors: dict = field(default_factory=dict)
    frozen: bool = False

    def zero_grad(self):
        zero_grads(self.tensors.values())

    def max_abs_grad(self) -> float:
        worst = 0.0
        for t in self.tensors.values():
            if t.grad is not None and t.grad.size:
                worst = max(worst, float(np.abs(t.grad).max()))
        return worst


def named_tensors(obj, prefix: str = ""):
    """Yield (dotted-name, Tensor) pairs from nested dataclasses/lists."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from named_tensors(item, name)


def map_tensors(fn, obj):
    """Rebuild a nested parameter structure with fn applied to each Tensor."""
    if isinstance(obj, Tensor):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        kwargs = {f.name: map_tensors(fn, getattr(obj, f.name))
                  for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [map_tensors(fn, x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(map_tensors(fn, x) for x in obj)
    return obj


def detach_params(obj):
    """Same parameter structure with every tensor detached (stop-gradient)."""
    return map_tensors(lambda t: t.detach(), obj)


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check_report(f, params, step: float = 1e-5, samples: int = 20,
                      rng: np.random.Generator | None = None) -> dict:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must rebuild its graph on every call and be deterministic;
    determinism is verified by evaluating twice. Existing ``.grad`` buffers
    on the checked tensors are cleared. Returns a per-tensor error dict.
    """
    if isinstance(params, dict):
        named = dict(params)
    else:
        named = {f"p{i}": t for i, t in enumerate(params)}
    rng = rng if rng is not None else np.random.default_rng(0)

    with no_grad():
        v1 = float(f(params).values)
        v2 = float(f(params).values)
    if v1 != v2:
        raise NondeterministicFunctionError(
            f"function returned {v1!r} then {v2!r} for identical inputs")

    for t in named.values():
        t.zero_grad()
    backward(f(params))
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
                for name, t in named.items()}

    report = {}
    with no_grad():
        for name, t in named.items():
            flat = t.values.reshape(-1)
            n = flat.size
            if n == 0:
                report[name] = 0.0
                continue
            count = min(samples, n)
            coords = rng.choice(n, size=count, replace=False)
            worst = 0.0
            for idx in coords:
                orig = flat[idx]
                flat[idx] = orig + step
                fp = float(f(params).values)
                flat[idx] = orig - step
                fm = float(f(params).values)
                flat[idx] = orig
                cd = (fp - fm) / (2.0 * step)
                an = float(analytic[name].reshape(-1)[idx])
                worst = max(worst, abs(an - cd) / (abs(an) + abs(cd) + 1e-12))
            report[name] = worst
    return report


def grad_check(f, params, step: float = 1e-5, samples: int = 20,
               rng: np.random.Generator | None = None) -> float:
    report = grad_check_report(f, params, step=step, samples=samples, rng=rng)
    return max(report.values()) if report else 0.0
