"""Dense tensors with tape-free reverse-mode differentiation.

Every op builds its output eagerly and stores a closure that maps the
output gradient to one gradient per parent.  ``Tensor.backward`` orders the
reachable nodes topologically and runs those closures in reverse.

Shapes are explicit: elementwise ops require equal shapes, and the only
implicit expansion is a bias over the last axis or a shared 2-D weight on
the right of ``matmul``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        order = graph_nodes(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg

    # operator sugar; each routes to a named op below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def __getitem__(self, index):
        return getitem(self, index)


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result; ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # float arrays keep their precision; anything else becomes float64
    return Tensor(x if dtype is None else np.asarray(x, dtype=dtype))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)  # a numpy float64 scalar would promote float32 data
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable array of the same shape (e.g. a frame mask)."""
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return make_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form: one pass, no overflow in either tail
    out = np.tanh(v * 0.5)
    out += 1.0
    out *= 0.5
    return out


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    y = x.data * s
    return make_op(y, (x,), lambda g: (g * (s + y * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return make_op(np.where(on, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * on,))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"glu: last axis must be even, got {d}")
    h = d // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return make_op(a * s, (x,), backward)


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either ``(..., k, p)`` with the same
    leading axes or a shared ``(k, p)`` matrix.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, p = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, p)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_op(out, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return make_op(np.array(out, copy=True), (x,), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    for t in xs[1:]:
        _same_shape("stack", xs[0], t)
    out = np.stack([t.data for t in xs], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return make_op(out, xs, backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_op(out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


# reductions --------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_op(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),)
    )


def weighted_sum(xs: Iterable[Tensor], weights: Iterable[float]) -> Tensor:
    """sum_i w_i * x_i over scalars (the multi-task total loss)."""
    xs, weights = list(xs), [float(w) for w in weights]
    if len(xs) != len(weights):
        raise ValueError("weighted_sum: need one weight per term")
    for t in xs:
        if t.data.size != 1:
            raise ShapeError(f"weighted_sum expects scalars, got {t.shape}")
    total = np.asarray(sum(w * t.data.reshape(()) for w, t in zip(weights, xs)))
    return make_op(total, xs, lambda g: tuple(g * w for w in weights))


# normalisation / attention primitives --------------------------------------------

def softmax_rows(x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with row-max subtraction.

    ``key_mask`` (B, n) with True = keep applies to every row of batch item
    b when x is (B, ..., n); masked entries get probability exactly 0.  A row
    with nothing left is an error.
    """
    v = x.data
    if np.isnan(v).any():
        raise ValueError("softmax_rows: NaN in input")
    shape = v.shape
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (shape[0], shape[-1]):
            raise ShapeError(f"softmax_rows: mask {key_mask.shape} vs input {shape}")
        if not key_mask.any(axis=1).all():
            raise ValueError("softmax_rows: row with no admissible entries")
        x3 = v.reshape(shape[0], -1, shape[-1])
    else:
        x3 = v.reshape(1, -1, shape[-1])
    p3 = kernels.softmax(x3, key_mask)
    p = p3.reshape(shape)

    def backward(g):
        return (kernels.softmax_backward(p3, g.reshape(p3.shape)).reshape(shape),)

    return make_op(p, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs last axis {d}")
    shape = x.shape
    out, xhat, inv = kernels.layer_norm(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def backward(g):
        gx, gg, gb = kernels.layer_norm_backward(g.reshape(-1, d), xhat, inv, gamma.data)
        return gx.reshape(shape), gg, gb

    return make_op(out.reshape(shape), (x, gamma, beta), backward)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 'same' convolution along the time axis.

    x: (..., n, C); w: (k, C) with odd k; b: (C,).  Output position i sees
    inputs i - k//2 .. i + k//2, with zeros outside the sequence.
    """
    k, c = w.shape
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel must be odd, got {k}")
    if x.shape[-1] != c or b.shape != (c,):
        raise ShapeError(f"depthwise_conv1d: channels {x.shape} vs weight {w.shape} / bias {b.shape}")
    n = x.shape[-2]
    r = k // 2
    pad = [(0, 0)] * (x.data.ndim - 2) + [(r, r), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(b.data, x.shape).copy()
    for j in range(k):
        out += xp[..., j:j + n, :] * w.data[j]
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for j in range(k):
            gxp[..., j:j + n, :] += g * w.data[j]
            gw[j] = (g * xp[..., j:j + n, :]).sum(axis=lead)
        return gxp[..., r:r + n, :], gw, g.sum(axis=lead)

    return make_op(out, (x, w, b), backward)


def embedding(ids: np.ndarray, table: Tensor, frozen_rows: Sequence[int] = ()) -> Tensor:
    """Row lookup; rows listed in ``frozen_rows`` receive no gradient."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    frozen = list(frozen_rows)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if frozen:
            gt[frozen] = 0.0
        return (gt,)

    return make_op(table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum_i weights[i] * -log softmax(logits[i])[labels[i]].

    Entries with weight 0 may carry any label (e.g. -1 for 'invalid').
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=logits.dtype)
    if labels.shape != logits.shape[:-1] or weights.shape != labels.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, labels {labels.shape}, weights {weights.shape}"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(weights != 0, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum()

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, safe[..., None],
            np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1,
        )
        return (g * weights[..., None] * grad,)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# verification ----------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_entries: int | None = None,
    skip: Sequence[np.ndarray | None] | None = None,
) -> float:
    """Max over checked entries of |analytic - central difference| / max(1, |central difference|).

    ``f`` rebuilds the graph from the current parameter values each call and
    must return a scalar.  With ``max_entries`` only that many randomly chosen
    entries per parameter are perturbed.  ``skip`` holds, per parameter, an
    optional boolean mask of entries left unchecked (frozen table rows).
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for j, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if skip is not None and skip[j] is not None:
            idx = idx[~np.asarray(skip[j], dtype=bool).reshape(-1)]
        if max_entries is not None and len(idx) > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(idx, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
