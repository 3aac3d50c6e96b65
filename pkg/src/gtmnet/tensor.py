"""Dense tensors with reverse-mode automatic differentiation.

numpy supplies storage and arithmetic; graph bookkeeping, backward rules,
and the finite-difference gradient checker live here.  Model code keeps the
logical (H, W, T, C) axes in the trailing dimensions of every value, so any
leading axes (usually a batch axis) pass through all operators untouched.

Conventions fixed by this module:

* ``roll(x, axis, k)[t] == x[(t - k) % extent]`` along ``axis``; the
  gradient of a roll is the roll by ``-k``.
* ``gelu`` is exactly the tanh approximation
  ``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))``.
* ``layer_norm`` normalises the last axis using the biased (population)
  variance.
* float64 ("f64") is the verification mode; float32 ("f32") is the
  training mode.  One computation sticks to one mode; ``matmul``,
  ``layer_norm`` and ``concat`` reject mixed dtypes.

Tensors are treated as immutable while a graph that references them is
alive; optimisers mutate parameter ``.data`` in place only between passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (forward only)."""

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
    """A dense row-major array plus an optional gradient.

    ``requires_grad`` marks leaves (parameters); interior nodes track their
    parents and a backward closure only while grad mode is enabled.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in topo:
            if node.grad is None and (node.requires_grad or node._backward is not None):
                node.grad = np.zeros_like(node.data)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar; every overload routes through the module functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def _coerce(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward, requires_grad) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and requires_grad:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}; "
            "one computation sticks to one precision mode"
        )


def add(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, a)
    out = a.data + b.data
    req = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward, req)


def mul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, a)
    out = a.data * b.data
    req = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), backward, req)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contract the last axis of ``a`` with a 2-D matrix ``b``.

    ``a`` may carry any number of leading axes; numpy stack semantics give
    ``(..., M, K) @ (K, N) -> (..., M, N)`` and ``(K,) @ (K, N) -> (N,)``.
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul expects Tensor operands")
    _same_dtype("matmul", a, b)
    if b.data.ndim != 2:
        raise ShapeError(f"matmul: right operand must be 2-D, got shape {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    req = a.requires_grad or b.requires_grad

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            k = a.data.shape[-1]
            n = b.data.shape[1]
            b.grad += a.data.reshape(-1, k).T @ g.reshape(-1, n)

    return _node(out, (a, b), backward, req)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    orig = x.data.shape

    def backward(g):
        if x.requires_grad:
            x.grad += g.reshape(orig)

    return _node(out, (x,), backward, x.requires_grad)


def permute_last(x: Tensor, perm) -> Tensor:
    """Permute the last ``len(perm)`` axes of ``x``; leading axes stay put."""
    perm = tuple(int(p) for p in perm)
    k = len(perm)
    if sorted(perm) != list(range(k)):
        raise ConfigError(f"permute_last: {perm} is not a permutation of 0..{k - 1}")
    if k > x.data.ndim:
        raise ShapeError(f"permute_last: {k} axes requested, tensor has {x.data.ndim}")
    lead = x.data.ndim - k
    axes = tuple(range(lead)) + tuple(lead + p for p in perm)
    out = np.transpose(x.data, axes)
    inv = tuple(range(lead)) + tuple(lead + int(q) for q in np.argsort(perm))

    def backward(g):
        if x.requires_grad:
            x.grad += np.transpose(g, inv)

    return _node(out, (x,), backward, x.requires_grad)


def roll(x: Tensor, axis: int, k: int) -> Tensor:
    """Circularly shift ``axis`` so that ``out[t] = x[(t - k) % extent]``."""
    out = np.roll(x.data, int(k), axis=int(axis))

    def backward(g):
        if x.requires_grad:
            x.grad += np.roll(g, -int(k), axis=int(axis))

    return _node(out, (x,), backward, x.requires_grad)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        _same_dtype("concat", first, t)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.grad += piece

    return _node(out, tuple(tensors), backward, req)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather ``indices`` (1-D, repeats allowed) along ``axis``.

    The backward pass scatter-adds, so overlapping windows accumulate.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take: indices must be 1-D, got shape {idx.shape}")
    extent = x.data.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise ShapeError(f"take: index out of range for extent {extent} on axis {axis}")
    out = np.take(x.data, idx, axis=axis)
    ax = axis if axis >= 0 else x.data.ndim + axis

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(np.moveaxis(gx, ax, 0), idx, np.moveaxis(g, ax, 0))
            x.grad += gx

    return _node(out, (x,), backward, x.requires_grad)


def pad_axes(x: Tensor, pad: dict) -> Tensor:
    """Zero-pad selected axes; ``pad`` maps axis -> (before, after)."""
    widths = [(0, 0)] * x.data.ndim
    for axis, (before, after) in pad.items():
        ax = axis if axis >= 0 else x.data.ndim + axis
        widths[ax] = (int(before), int(after))
    out = np.pad(x.data, widths)
    slices = tuple(
        slice(b, dim + b) for (b, _), dim in zip(widths, x.data.shape)
    )

    def backward(g):
        if x.requires_grad:
            x.grad += g[slices]

    return _node(out, (x,), backward, x.requires_grad)


def mean(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if not axes:
        raise ConfigError("mean: axes must be non-empty")
    norm = tuple(sorted(a if a >= 0 else x.data.ndim + a for a in axes))
    if len(set(norm)) != len(norm):
        raise ConfigError(f"mean: repeated axis in {axes}")
    if norm and (norm[0] < 0 or norm[-1] >= x.data.ndim):
        raise ShapeError(f"mean: axis out of range for shape {x.shape}")
    out = x.data.mean(axis=norm)
    count = 1
    for a in norm:
        count *= x.data.shape[a]
    keep_shape = tuple(1 if i in norm else n for i, n in enumerate(x.data.shape))

    def backward(g):
        if x.requires_grad:
            x.grad += np.broadcast_to(g.reshape(keep_shape), x.data.shape) / count

    return _node(out, (x,), backward, x.requires_grad)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d * d * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            sech2 = 1.0 - t * t
            slope = 0.5 * (1.0 + t) + 0.5 * d * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
            x.grad += g * slope

    return _node(out, (x,), backward, x.requires_grad)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            gy = g * out
            x.grad += gy - out * gy.sum(axis=axis, keepdims=True)

    return _node(out, (x,), backward, x.requires_grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis (biased variance), then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match feature width ({c},)"
        )
    _same_dtype("layer_norm", x, gamma)
    _same_dtype("layer_norm", x, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    req = x.requires_grad or gamma.requires_grad or beta.requires_grad

    def backward(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            beta.grad += g.reshape(-1, c).sum(axis=0)
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.grad += (gx - m1 - xhat * m2) * inv

    return _node(out, (x, gamma, beta), backward, req)


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` has classes on the last axis; ``labels`` matches the leading
    shape.  With smoothing ``eps`` the target is
    ``(1 - eps) * onehot + eps / K``.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    k = logits.data.shape[-1]
    lab = np.asarray(labels)
    if lab.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: labels shape {lab.shape} does not match logits {logits.shape}"
        )
    if not np.issubdtype(lab.dtype, np.integer):
        raise ConfigError("cross_entropy: labels must be integers")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ConfigError(f"cross_entropy: label out of range [0, {k})")

    flat_logits = logits.data.reshape(-1, k)
    flat_lab = lab.reshape(-1)
    n = flat_logits.shape[0]
    shifted = flat_logits - flat_logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    eps = label_smoothing
    picked = logp[np.arange(n), flat_lab]
    per_sample = -(1.0 - eps) * picked - (eps / k) * logp.sum(axis=1)
    out = np.asarray(per_sample.mean(), dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            q = np.full_like(p, eps / k)
            q[np.arange(n), flat_lab] += 1.0 - eps
            gx = (p - q) * (g.reshape(()) / n)
            logits.grad += gx.reshape(logits.data.shape)

    return _node(out, (logits,), backward, logits.requires_grad)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    tol: float
    h: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self):
        lines = [
            f"{'ok' if e.passed else 'FAIL'} {e.name} max_rel_err={e.max_rel_error:.3e}"
            for e in self.entries
        ]
        return "\n".join(lines)


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward-pass gradients of ``f()`` against central differences.

    ``f`` is a deterministic closure returning a scalar Tensor; ``params``
    lists the float64 leaves to probe, as Tensors or (name, Tensor) pairs.
    The numeric derivative is ``(f(p + h) - f(p - h)) / (2 h)`` per element;
    the relative error per element is ``|a - n| / max(|a|, |n|, 1)`` and the
    report keeps the maximum per parameter.
    """
    norm: list[tuple[str, Tensor]] = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            norm.append((str(p[0]), p[1]))
        else:
            norm.append((f"param{i}", p))
    for name, p in norm:
        if p.data.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters; '{name}' is {p.data.dtype}")
        p.grad = None

    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    loss.backward()
    analytic = {}
    for name, p in norm:
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    entries = []
    with no_grad():
        for name, p in norm:
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = f().item()
                flat[i] = orig - h
                lo = f().item()
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NumericError(f"grad_check: non-finite probe at '{name}'[{i}]")
                numeric = (hi - lo) / (2.0 * h)
                a = a_flat[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
                worst = max(worst, rel)
            entries.append(GradCheckEntry(name, worst, worst <= tol))
    return GradCheckReport(entries, tol, h)
