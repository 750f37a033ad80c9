"""Text-queries-audio matcher with utterance and per-prefix match heads.

The anchor is always padded to ``max_len`` rows, so the attention output
has a fixed (T, D) shape no matter how long the keyword or the audio is.
The utterance head reads the whole flattened output; prefix head ``t``
(0-based) reads only the first ``t+1`` rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .frontend import INVALID
from .layers import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor


@dataclass
class MatcherConfig:
    hidden: int = 64
    filter: int = 128
    layers: int = 4
    heads: int = 4
    max_len: int = 25

    def validate(self):
        if self.hidden % self.heads:
            raise ValueError(f"matcher hidden {self.hidden} not divisible by {self.heads} heads")
        if min(self.hidden, self.filter, self.layers, self.max_len) < 1:
            raise ValueError("matcher sizes must be positive")


class CrossAttentionBlock(Module):
    """Post-norm transformer block: cross-attention then feed-forward."""

    def __init__(self, rng, cfg: MatcherConfig, dtype):
        self.attn = MultiHeadAttention(rng, cfg.hidden, cfg.heads, dtype)
        self.attn_norm = LayerNorm(cfg.hidden, dtype)
        self.ff = FeedForward(rng, cfg.hidden, cfg.filter, "relu", dtype)
        self.ff_norm = LayerNorm(cfg.hidden, dtype)

    def __call__(self, q: Tensor, audio: Tensor, key_mask=None) -> Tensor:
        q = self.attn_norm(q + self.attn(q, audio, key_mask=key_mask))
        return self.ff_norm(q + self.ff(q))


class Matcher(Module):
    def __init__(self, rng, cfg: MatcherConfig, table_rows: int, frozen_rows, dtype=np.float64,
                 with_subsequence_heads: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.p2v = Embedding(rng, table_rows, cfg.hidden, frozen_rows, dtype)
        self.query_proj = Linear(rng, cfg.hidden, cfg.hidden, dtype)
        self.blocks = [CrossAttentionBlock(rng, cfg, dtype) for _ in range(cfg.layers)]
        T, D = cfg.max_len, cfg.hidden
        self.utt_head = Linear(rng, T * D, 2, dtype)
        self.ss_heads = (
            [Linear(rng, (t + 1) * D, 2, dtype) for t in range(T)] if with_subsequence_heads else []
        )

    def query(self, anchor_ids: np.ndarray) -> Tensor:
        """(B, T) padded ids -> projected P2V embeddings (B, T, D)."""
        return self.query_proj(self.p2v(anchor_ids))

    def cross_attend(self, q: Tensor, audio: Tensor, key_mask=None) -> Tensor:
        if audio.shape[-2] == 0:
            raise ValueError("cross_attend: audio has no frames (n = 0)")
        if q.shape[-1] != audio.shape[-1]:
            raise tn.ShapeError(f"cross_attend: query dim {q.shape[-1]} != audio dim {audio.shape[-1]}")
        for block in self.blocks:
            q = block(q, audio, key_mask)
        return q

    def utterance_head(self, C: Tensor) -> Tensor:
        return utterance_logits(C, self.utt_head)

    def subsequence_heads(self, C: Tensor) -> Tensor:
        if not self.ss_heads:
            raise RuntimeError("subsequence heads were stripped from this model")
        return subsequence_logits(C, self.ss_heads)


def flatten_rows(C: Tensor) -> Tensor:
    """(B, T, D) -> (B, T*D) row-major, so the first t rows are the first t*D entries."""
    B, T, D = C.shape
    return tn.reshape(C, (B, T * D))


def utterance_logits(C: Tensor, head: Linear) -> Tensor:
    return head(flatten_rows(C))


def subsequence_logits(C: Tensor, heads: list[Linear]) -> Tensor:
    """(B, T, 2): head t sees flattened C[:, :t+1]."""
    B, T, D = C.shape
    if len(heads) != T:
        raise tn.ShapeError(f"need {T} prefix heads, have {len(heads)}")
    flat = flatten_rows(C)
    outs = [heads[t](tn.getitem(flat, (slice(None), slice(0, (t + 1) * D)))) for t in range(T)]
    return tn.stack(outs, axis=1)


def match_score(logits) -> np.ndarray:
    """Softmax probability of the match class (index 1)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p[..., 1] / p.sum(axis=-1)


def utterance_loss(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy of the utterance decision."""
    labels = np.asarray(labels)
    w = np.full(labels.shape, 1.0 / len(labels))
    return tn.cross_entropy(logits, labels, w)


def subsequence_loss(head_logits: Tensor, labels) -> Tensor:
    """Per sample: mean cross-entropy over positions whose label is not
    INVALID; then the mean over the batch.  Accepts (T, 2) + (T,) or a batch."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
        head_logits = tn.reshape(head_logits, (1,) + head_logits.shape)
    valid = labels != INVALID
    counts = valid.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("subsequence_loss: a sample has no valid positions")
    w = valid / counts / labels.shape[0]
    return tn.cross_entropy(head_logits, labels, w)
