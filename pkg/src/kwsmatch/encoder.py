"""Audio encoder (a small conformer), CTC projection and CTC loss."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as tn
from .layers import DepthwiseConv1d, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor


@dataclass
class EncoderConfig:
    input_dim: int = 64
    layers: int = 4
    dim: int = 64
    conv_kernel: int = 7
    ff_expansion: int = 2
    heads: int = 4

    def validate(self):
        if self.dim % self.heads:
            raise ValueError(f"encoder dim {self.dim} not divisible by {self.heads} heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv kernel must be odd, got {self.conv_kernel}")
        if min(self.layers, self.input_dim, self.dim, self.ff_expansion) < 1:
            raise ValueError("encoder sizes must be positive")


class ConvModule(Module):
    # layer-norm stands in for batch-norm after the depthwise conv so that a
    # sample's output never depends on its batch-mates
    def __init__(self, rng, dim, kernel, dtype):
        self.norm = LayerNorm(dim, dtype)
        self.pointwise_in = Linear(rng, dim, 2 * dim, dtype)
        self.depthwise = DepthwiseConv1d(rng, dim, kernel, dtype)
        self.conv_norm = LayerNorm(dim, dtype)
        self.pointwise_out = Linear(rng, dim, dim, dtype)

    def __call__(self, x: Tensor, frame_mask: np.ndarray | None) -> Tensor:
        h = tn.glu(self.pointwise_in(self.norm(x)))
        if frame_mask is not None:
            # padded frames must look like the zero padding past the sequence end
            h = tn.mul_const(h, np.broadcast_to(frame_mask[..., None], h.shape).astype(h.dtype))
        h = tn.swish(self.conv_norm(self.depthwise(h)))
        return self.pointwise_out(h)


class ConformerBlock(Module):
    """Half-step FF, self-attention, convolution, half-step FF, layer-norm;
    every sub-module sits on a residual path and starts with its own layer-norm."""

    def __init__(self, rng, cfg: EncoderConfig, dtype):
        d = cfg.dim
        self.ff1_norm = LayerNorm(d, dtype)
        self.ff1 = FeedForward(rng, d, d * cfg.ff_expansion, "swish", dtype)
        self.attn_norm = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(rng, d, cfg.heads, dtype)
        self.conv = ConvModule(rng, d, cfg.conv_kernel, dtype)
        self.ff2_norm = LayerNorm(d, dtype)
        self.ff2 = FeedForward(rng, d, d * cfg.ff_expansion, "swish", dtype)
        self.out_norm = LayerNorm(d, dtype)

    def __call__(self, x: Tensor, frame_mask=None) -> Tensor:
        x = x + tn.scale(self.ff1(self.ff1_norm(x)), 0.5)
        h = self.attn_norm(x)
        x = x + self.attn(h, h, key_mask=frame_mask)
        x = x + self.conv(x, frame_mask)
        x = x + tn.scale(self.ff2(self.ff2_norm(x)), 0.5)
        return self.out_norm(x)


class AudioEncoder(Module):
    def __init__(self, rng, cfg: EncoderConfig, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.input_proj = Linear(rng, cfg.input_dim, cfg.dim, dtype)
        self.blocks = [ConformerBlock(rng, cfg, dtype) for _ in range(cfg.layers)]

    def __call__(self, frames, frame_mask: np.ndarray | None = None) -> Tensor:
        """(B, n, F) or (n, F) frames -> same leading shape with D channels.

        ``frame_mask`` (B, n) marks real frames when a batch is right-padded;
        outputs at real frames then match an unpadded forward.
        """
        x = tn.as_tensor(frames)
        if x.shape[-2] == 0:
            raise ValueError("encode_audio: audio has no frames (n = 0)")
        if x.shape[-1] != self.cfg.input_dim:
            raise tn.ShapeError(
                f"encode_audio: feature dim {x.shape[-1]} != configured {self.cfg.input_dim}"
            )
        unbatched = x.data.ndim == 2
        if unbatched:
            x = tn.reshape(x, (1,) + x.shape)
        h = self.input_proj(x)
        for block in self.blocks:
            h = block(h, frame_mask)
        return tn.reshape(h, h.shape[1:]) if unbatched else h


def encode_audio(frames, encoder: AudioEncoder, frame_mask=None) -> Tensor:
    return encoder(frames, frame_mask)


class CtcHead(Module):
    """Per-frame scores over the phonemes plus one blank (the last class)."""

    def __init__(self, rng, dim: int, vocab_size: int, dtype=np.float64):
        self.proj = Linear(rng, dim, vocab_size + 1, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.proj(h)


def ctc_logits(h: Tensor, head: CtcHead) -> Tensor:
    return head(h)


def ctc_loss(logits: Tensor, targets, lengths=None, blank=None):
    """Mean CTC negative log-likelihood over samples whose target is reachable.

    logits: (B, n_max, C) or (n, C).  targets: list of label arrays.
    lengths: real frame counts (default: all frames).  Returns ``(loss,
    feasible)`` where ``feasible`` flags the samples that entered the mean.
    If none did, ``loss`` is a constant zero and carries no gradient.
    """
    unbatched = logits.data.ndim == 2
    data = logits.data[None] if unbatched else logits.data
    if unbatched and not isinstance(targets, (list, tuple)):
        targets = [targets]
    B, n_max, C = data.shape
    blank = C - 1 if blank is None else blank
    lengths = np.full(B, n_max) if lengths is None else np.asarray(lengths)
    tl = np.array([len(t) for t in targets], dtype=np.int64)
    tgt = np.zeros((B, max(1, tl.max())), dtype=np.int64)
    for b, t in enumerate(targets):
        tgt[b, : len(t)] = t
    nll, grad = kernels.ctc_batch(data, lengths, tgt, tl, blank)
    feasible = np.isfinite(nll)
    k = int(feasible.sum())
    if k == 0:
        return Tensor(np.zeros((), dtype=logits.dtype)), feasible
    value = nll[feasible].sum() / k
    grad = (grad / k).astype(logits.dtype)
    if unbatched:
        grad = grad[0]

    def backward(g):
        return (g * grad,)

    return tn.make_op(np.asarray(value, dtype=logits.dtype), (logits,), backward), feasible


def ctc_nll(logits: np.ndarray, target, blank=None) -> float:
    """Single-instance CTC negative log-likelihood (inf when unreachable)."""
    logits = np.asarray(logits, dtype=np.float64)
    blank = logits.shape[1] - 1 if blank is None else blank
    t = np.asarray(target, dtype=np.int64)
    nll, _ = kernels.ctc_batch(logits[None], [logits.shape[0]], t[None], [len(t)], blank)
    return float(nll[0])


def collapse(path, blank: int) -> list[int]:
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


def ctc_brute_force(logits: np.ndarray, target, blank=None, limit: int = 10**6) -> float:
    """Exhaustive-enumeration CTC loss; a verification oracle only."""
    logits = np.asarray(logits, dtype=np.float64)
    n, C = logits.shape
    blank = C - 1 if blank is None else blank
    if C ** n > limit:
        raise ValueError(f"instance too large for enumeration: {C}^{n} > {limit}")
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    target = [int(x) for x in target]
    total = 0.0
    for path in itertools.product(range(C), repeat=n):
        if collapse(path, blank) == target:
            total += float(np.prod(probs[np.arange(n), path]))
    return -np.log(total) if total > 0 else np.inf


def greedy_decode(logits: np.ndarray, blank=None) -> list[int]:
    logits = np.asarray(logits)
    blank = logits.shape[-1] - 1 if blank is None else blank
    return collapse(np.argmax(logits, axis=-1), blank)
