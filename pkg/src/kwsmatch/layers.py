"""Layer kinds used by the encoder and matcher, in functional and module form."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


# functional forms ------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = tn.matmul(x, weight)
    return tn.add_bias(y, bias) if bias is not None else y


def feed_forward(x, w1, b1, w2, b2, activation: str = "swish") -> Tensor:
    act = {"swish": tn.swish, "relu": tn.relu}[activation]
    return linear(act(linear(x, w1, b1)), w2, b2)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return tn.transpose(tn.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head_attention(
    query: Tensor,
    memory: Tensor,
    params: dict[str, Tensor],
    heads: int,
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention of ``query`` rows over ``memory`` rows.

    query: (B, Tq, D) or (Tq, D); memory: (B, n, D) or (n, D).  params hold
    wq/bq, wk/bk, wv/bv, wo/bo.  ``key_mask`` is (B, n) with True on real
    frames.  Self-attention is the case query is memory.
    """
    unbatched = query.data.ndim == 2
    if unbatched:
        query = tn.reshape(query, (1,) + query.shape)
        memory = tn.reshape(memory, (1,) + memory.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    d = query.shape[-1]
    if memory.shape[-1] != d:
        raise tn.ShapeError(f"attention: query dim {d} != memory dim {memory.shape[-1]}")
    if memory.shape[1] == 0:
        raise ValueError("attention: empty memory (n = 0)")
    if d % heads:
        raise tn.ShapeError(f"attention: dim {d} not divisible by {heads} heads")
    # 1/sqrt(head dim) is applied to the (B, Tq, D) queries, not the score map
    q = split_heads(tn.scale(linear(query, params["wq"], params["bq"]), (d // heads) ** -0.5), heads)
    k = split_heads(linear(memory, params["wk"], params["bk"]), heads)
    v = split_heads(linear(memory, params["wv"], params["bv"]), heads)
    scores = tn.matmul(q, tn.transpose(k, (0, 1, 3, 2)))
    weights = tn.softmax_rows(scores, key_mask)
    ctx = merge_heads(tn.matmul(weights, v))
    out = linear(ctx, params["wo"], params["bo"])
    if unbatched:
        out = tn.reshape(out, out.shape[1:])
    return (out, weights) if return_weights else out


def _layer_norm(x, params, eps=1e-5):
    return tn.layer_norm(x, params["gamma"], params["beta"], eps)


def _embedding(ids, params, pad_id=None):
    frozen = () if pad_id is None else (pad_id,)
    return tn.embedding(ids, params["table"], frozen)


LAYER_KINDS = {
    "linear": lambda x, p, **kw: linear(x, p["weight"], p.get("bias")),
    "layer-norm": lambda x, p, **kw: _layer_norm(x, p, **kw),
    "depthwise-conv1d": lambda x, p, **kw: tn.depthwise_conv1d(x, p["weight"], p["bias"]),
    "feed-forward": lambda x, p, **kw: feed_forward(x, p["w1"], p["b1"], p["w2"], p["b2"], **kw),
    "multi-head-attention": lambda x, p, memory=None, heads=4, key_mask=None: multi_head_attention(
        x, x if memory is None else memory, p, heads, key_mask
    ),
    "swish": lambda x, p, **kw: tn.swish(x),
    "glu": lambda x, p, **kw: tn.glu(x),
    "residual-add": lambda x, p, branch=None: tn.add(x, branch),
    "embedding-lookup": lambda x, p, **kw: _embedding(x, p, **kw),
}


def layer_forward(kind: str, params: dict, x, **options):
    """Apply one layer kind by name; see ``LAYER_KINDS`` for the menu."""
    try:
        fn = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}; known: {sorted(LAYER_KINDS)}") from None
    return fn(x, params, **options)


# modules ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Parameter container; parameters are Tensor attributes, children are
    Module attributes or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, dtype=np.float64):
        self.weight = tn.parameter(glorot(rng, n_in, n_out).astype(dtype))
        self.bias = tn.parameter(np.zeros(n_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = tn.parameter(np.ones(dim, dtype))
        self.beta = tn.parameter(np.zeros(dim, dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta, self.eps)


class DepthwiseConv1d(Module):
    def __init__(self, rng, channels: int, kernel: int, dtype=np.float64):
        # fan_in = fan_out = kernel for a per-channel filter
        self.weight = tn.parameter(glorot(rng, kernel, kernel, (kernel, channels)).astype(dtype))
        self.bias = tn.parameter(np.zeros(channels, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.depthwise_conv1d(x, self.weight, self.bias)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int, activation="swish", dtype=np.float64):
        self.fc1 = Linear(rng, dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return feed_forward(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias,
                            self.activation)


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(rng, dim, dim, dtype)
        self.k = Linear(rng, dim, dim, dtype)
        self.v = Linear(rng, dim, dim, dtype)
        self.o = Linear(rng, dim, dim, dtype)

    def param_dict(self) -> dict[str, Tensor]:
        return {
            "wq": self.q.weight, "bq": self.q.bias, "wk": self.k.weight, "bk": self.k.bias,
            "wv": self.v.weight, "bv": self.v.bias, "wo": self.o.weight, "bo": self.o.bias,
        }

    def __call__(self, query, memory, key_mask=None, return_weights=False):
        return multi_head_attention(query, memory, self.param_dict(), self.heads, key_mask,
                                    return_weights)


class Embedding(Module):
    """Lookup table whose ``frozen`` rows stay zero and get no gradient."""

    def __init__(self, rng, rows: int, dim: int, frozen=(), dtype=np.float64):
        table = rng.normal(0.0, 1.0, size=(rows, dim)).astype(dtype)
        self.frozen = tuple(frozen)
        table[list(self.frozen)] = 0.0
        self.table = tn.parameter(table)

    def __call__(self, ids) -> Tensor:
        return tn.embedding(ids, self.table, self.frozen)
