"""Hot loops: CTC forward-backward, masked softmax and layer-norm.

Each kernel has two interchangeable implementations.  The numba one is
used when numba imports and ``KWSMATCH_DISABLE_NUMBA`` is unset (or "0");
otherwise the pure-numpy one.  In numba mode the softmax forward only moves
the row-max shift into numba and keeps numpy's vectorised exp.  The numpy
CTC vectorises over the blank-extended states at each frame; the numba one
is a plain double loop.  ``benchmarks/bench_kernels.py`` times both sides.

    >>> import os; os.environ["KWSMATCH_DISABLE_NUMBA"] = "1"   # before import
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_DISABLED = os.environ.get("KWSMATCH_DISABLE_NUMBA", "0") not in ("", "0")
USE_NUMBA = numba is not None and not NUMBA_DISABLED

NEG_INF = -np.inf


def extend_with_blanks(target: np.ndarray, blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved labels and, per state, whether the skip from s-2 is allowed."""
    target = np.asarray(target, dtype=np.int64)
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(len(ext), dtype=np.bool_)
    skip[3::2] = target[1:] != target[:-1]
    return ext, skip


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# pure numpy -------------------------------------------------------------------------

def _shift(v: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(v, NEG_INF)
    out[k:] = v[:-k]
    return out


def ctc_single_numpy(logp: np.ndarray, target: np.ndarray, blank: int):
    n = logp.shape[0]
    ext, skip = extend_with_blanks(target, blank)
    S = len(ext)
    emit = logp[:, ext]  # (n, S)
    alpha = np.full((n, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        if S > 2:
            acc = np.logaddexp(acc, np.where(skip, _shift(prev, 2), NEG_INF))
        alpha[t] = acc + emit[t]
    ll = np.logaddexp(alpha[n - 1, S - 1], alpha[n - 1, S - 2]) if S > 1 else alpha[n - 1, 0]
    if not np.isfinite(ll):
        return np.inf, np.zeros_like(logp)
    # beta[t, s]: log-prob of the remaining frames t+1.. given state s at t
    beta = np.full((n, S), NEG_INF)
    beta[n - 1, S - 1] = 0.0
    if S > 1:
        beta[n - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)
    skip_from[: S - 2] = skip[2:]
    for t in range(n - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = np.logaddexp(nxt, np.append(nxt[1:], NEG_INF))
        if S > 2:
            two = np.append(nxt[2:], [NEG_INF, NEG_INF])
            acc = np.logaddexp(acc, np.where(skip_from, two, NEG_INF))
        beta[t] = acc
    occ = np.exp(alpha + beta - ll)
    grad = np.exp(logp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return -ll, grad


def ctc_batch_numpy(logp, lengths, targets, target_lengths, blank):
    B = logp.shape[0]
    nll = np.empty(B)
    grad = np.zeros_like(logp)
    for b in range(B):
        n, L = int(lengths[b]), int(target_lengths[b])
        nll[b], grad[b, :n] = ctc_single_numpy(logp[b, :n], targets[b, :L], blank)
    return nll, grad


# numba ------------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _lse2(a, b):
        if a == -np.inf:
            return b
        if b == -np.inf:
            return a
        if a > b:
            return a + np.log1p(np.exp(b - a))
        return b + np.log1p(np.exp(a - b))

    @numba.njit(cache=True)
    def _ctc_one(logp, n, ext, skip, grad):
        S = ext.shape[0]
        alpha = np.full((n, S), -np.inf)
        beta = np.full((n, S), -np.inf)
        alpha[0, 0] = logp[0, ext[0]]
        if S > 1:
            alpha[0, 1] = logp[0, ext[1]]
        for t in range(1, n):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _lse2(a, alpha[t - 1, s - 1])
                if s >= 2 and skip[s]:
                    a = _lse2(a, alpha[t - 1, s - 2])
                alpha[t, s] = a + logp[t, ext[s]]
        if S > 1:
            ll = _lse2(alpha[n - 1, S - 1], alpha[n - 1, S - 2])
        else:
            ll = alpha[n - 1, 0]
        if ll == -np.inf:
            return np.inf
        beta[n - 1, S - 1] = 0.0
        if S > 1:
            beta[n - 1, S - 2] = 0.0
        for t in range(n - 2, -1, -1):
            for s in range(S):
                b = beta[t + 1, s] + logp[t + 1, ext[s]]
                if s + 1 < S:
                    b = _lse2(b, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
                if s + 2 < S and skip[s + 2]:
                    b = _lse2(b, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
                beta[t, s] = b
        C = logp.shape[1]
        for t in range(n):
            for c in range(C):
                grad[t, c] = np.exp(logp[t, c])
            for s in range(S):
                grad[t, ext[s]] -= np.exp(alpha[t, s] + beta[t, s] - ll)
        return -ll

    @numba.njit(cache=True)
    def ctc_batch_numba(logp, lengths, targets, target_lengths, blank):
        B = logp.shape[0]
        nll = np.empty(B)
        grad = np.zeros_like(logp)
        for b in range(B):
            L = target_lengths[b]
            S = 2 * L + 1
            ext = np.full(S, blank, dtype=np.int64)
            skip = np.zeros(S, dtype=np.bool_)
            for i in range(L):
                ext[2 * i + 1] = targets[b, i]
                if i > 0 and targets[b, i] != targets[b, i - 1]:
                    skip[2 * i + 1] = True
            nll[b] = _ctc_one(logp[b], lengths[b], ext, skip, grad[b])
        return nll, grad


def ctc_batch(logits: np.ndarray, lengths, targets, target_lengths, blank: int, use_numba=None):
    """Per-sample CTC negative log-likelihood and d(nll)/d(logits).

    logits: (B, n_max, C), only the first ``lengths[b]`` frames of sample b
    are read.  targets: (B, L_max) integer labels without blanks.  A sample
    whose target cannot be emitted in its frames gets nll = inf and a zero
    gradient.  Computation runs in float64 whatever the input dtype.
    """
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    lengths = np.asarray(lengths, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    target_lengths = np.asarray(target_lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(target_lengths < 1):
        raise ValueError("ctc: every sample needs at least one frame and one target label")
    if USE_NUMBA if use_numba is None else use_numba:
        return ctc_batch_numba(logp, lengths, targets, target_lengths, blank)
    return ctc_batch_numpy(logp, lengths, targets, target_lengths, blank)


# softmax over the last axis -------------------------------------------------------------

def softmax_numpy(x3: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """x3: (B, R, n); mask: (B, n) bool or None.  Row-max subtracted."""
    v = x3 if mask is None else np.where(mask[:, None, :], x3, -np.inf)
    m = v.max(axis=-1, keepdims=True)
    p = np.subtract(v, m, dtype=x3.dtype)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def softmax_backward_numpy(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    gp = g * p
    gp -= p * gp.sum(axis=-1, keepdims=True)
    return gp


def layer_norm_numpy(x2, gamma, beta, eps):
    mu = x2.mean(axis=-1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv


def layer_norm_backward_numpy(g2, xhat, inv, gamma):
    gxhat = g2 * gamma
    gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, (g2 * xhat).sum(axis=0), g2.sum(axis=0)


if numba is not None:

    @numba.njit(cache=True)
    def shift_rows_numba(x3, mask, use_mask):
        """x - rowmax over admissible entries; masked entries become -inf."""
        B, R, n = x3.shape
        out = np.empty_like(x3)
        for b in range(B):
            for r in range(R):
                m = -np.inf
                for j in range(n):
                    if (not use_mask or mask[b, j]) and x3[b, r, j] > m:
                        m = x3[b, r, j]
                for j in range(n):
                    if use_mask and not mask[b, j]:
                        out[b, r, j] = -np.inf
                    else:
                        out[b, r, j] = x3[b, r, j] - m
        return out

    @numba.njit(cache=True)
    def softmax_backward_numba(p, g):
        B, R, n = p.shape
        out = np.empty_like(p)
        for b in range(B):
            for r in range(R):
                s = 0.0
                for j in range(n):
                    s += g[b, r, j] * p[b, r, j]
                for j in range(n):
                    out[b, r, j] = p[b, r, j] * (g[b, r, j] - s)
        return out

    @numba.njit(cache=True)
    def layer_norm_numba(x2, gamma, beta, eps):
        N, d = x2.shape
        out = np.empty_like(x2)
        xhat = np.empty_like(x2)
        inv = np.empty((N, 1), dtype=x2.dtype)
        for i in range(N):
            mu = 0.0
            for j in range(d):
                mu += x2[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x2[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / np.sqrt(var + eps)
            inv[i, 0] = r
            for j in range(d):
                h = (x2[i, j] - mu) * r
                xhat[i, j] = h
                out[i, j] = h * gamma[j] + beta[j]
        return out, xhat, inv

    @numba.njit(cache=True)
    def layer_norm_backward_numba(g2, xhat, inv, gamma):
        N, d = g2.shape
        gx = np.empty_like(g2)
        gg = np.zeros(d, dtype=g2.dtype)
        gb = np.zeros(d, dtype=g2.dtype)
        for i in range(N):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gh = g2[i, j] * gamma[j]
                m1 += gh
                m2 += gh * xhat[i, j]
                gg[j] += g2[i, j] * xhat[i, j]
                gb[j] += g2[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = inv[i, 0] * (g2[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
        return gx, gg, gb


def softmax(x3, mask=None, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        # numba shifts by the row max (slow in numpy over short rows); numpy's
        # SIMD exp beats numba's scalar exp, so the rest stays in numpy
        x3 = np.ascontiguousarray(x3)
        if mask is None:
            p = shift_rows_numba(x3, np.ones((1, 1), dtype=np.bool_), False)
        else:
            p = shift_rows_numba(x3, np.ascontiguousarray(mask, dtype=np.bool_), True)
        np.exp(p, out=p)
        p /= p.sum(axis=-1, keepdims=True)
        return p
    return softmax_numpy(x3, mask)


def softmax_backward(p, g, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        return softmax_backward_numba(p, np.ascontiguousarray(g, dtype=p.dtype))
    return softmax_backward_numpy(p, g)


def layer_norm(x2, gamma, beta, eps, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        return layer_norm_numba(np.ascontiguousarray(x2), gamma.astype(x2.dtype),
                                beta.astype(x2.dtype), eps)
    return layer_norm_numpy(x2, gamma, beta, eps)


def layer_norm_backward(g2, xhat, inv, gamma, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        return layer_norm_backward_numba(np.ascontiguousarray(g2, dtype=xhat.dtype), xhat, inv,
                                         gamma.astype(xhat.dtype))
    return layer_norm_backward_numpy(g2, xhat, inv, gamma)
