"""Detection metrics, prefix-prediction dumps and ablation tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .frontend import LABEL_NAMES, PAIR_KINDS, Corpus, subsequence_labels
from .matcher import match_score


def _split(scores, truth):
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ValueError("scores and truth must be 1-D arrays of equal length")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    pos, neg = scores[truth], scores[~truth]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one positive and one negative")
    return pos, neg


def auc(scores, truth) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    pos, neg = _split(scores, truth)
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    at_or_below = np.searchsorted(neg_sorted, pos, side="right")
    # wins count 2, ties 1; halve once at the end so the sum stays integral
    doubled = int((below + at_or_below).sum())
    return doubled / (2 * len(pos) * len(neg))


def _error_rates(pos, neg):
    """FAR and FRR at every distinct threshold, plus both extremes.

    A pair is accepted when its score >= threshold.  Thresholds rise from
    -inf (accept all: FAR 1, FRR 0) to +inf (reject all: FAR 0, FRR 1).
    """
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg])), [np.inf]])
    neg_sorted, pos_sorted = np.sort(neg), np.sort(pos)
    false_acc = len(neg) - np.searchsorted(neg_sorted, thr, side="left")
    false_rej = np.searchsorted(pos_sorted, thr, side="left")
    return thr, false_acc, false_rej


def eer_from_counts(false_acc, false_rej, n_neg: int, n_pos: int) -> float:
    """Equal error rate from FA/FR counts at rising thresholds.

    Takes the first threshold where FRR >= FAR; if the rates are not equal
    there, interpolates linearly with the previous threshold.
    """
    far = np.asarray(false_acc, dtype=np.float64) / n_neg
    frr = np.asarray(false_rej, dtype=np.float64) / n_pos
    diff = far - frr  # starts at +1, ends at -1, non-increasing
    j = int(np.argmax(diff <= 0))
    if diff[j] == 0:
        return float(far[j])
    d0, d1 = diff[j - 1], diff[j]
    lam = d0 / (d0 - d1)
    return float(far[j - 1] + lam * (far[j] - far[j - 1]))


def eer(scores, truth) -> float:
    pos, neg = _split(scores, truth)
    _, fa, fr = _error_rates(pos, neg)
    return eer_from_counts(fa, fr, len(neg), len(pos))


def roc_points(scores, truth) -> np.ndarray:
    """(threshold, FAR, TPR) rows for plotting elsewhere."""
    pos, neg = _split(scores, truth)
    thr, fa, fr = _error_rates(pos, neg)
    return np.column_stack([thr, fa / len(neg), 1.0 - fr / len(pos)])


# scoring ---------------------------------------------------------------------------

@dataclass
class ScoredSet:
    scores: np.ndarray
    truth: np.ndarray      # 1 = match
    kinds: np.ndarray      # index into PAIR_KINDS

    def subset(self, kind: str) -> "ScoredSet":
        """Positives plus the negatives of one kind ('easy' or 'hard')."""
        keep = (self.kinds == PAIR_KINDS.index("positive")) | (self.kinds == PAIR_KINDS.index(kind))
        return ScoredSet(self.scores[keep], self.truth[keep], self.kinds[keep])

    def metrics(self) -> dict[str, float]:
        return {"auc": auc(self.scores, self.truth), "eer": eer(self.scores, self.truth)}


def score_corpus(model, corpus: Corpus, batch_size: int = 128) -> ScoredSet:
    from .model import make_batch

    order = np.argsort([len(f) for f in corpus.frames], kind="stable")
    scores = np.empty(len(corpus))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        scores[idx] = model.score(make_batch(corpus, idx, model.dtype))
    return ScoredSet(scores, corpus.utterance_labels(), corpus.kinds.astype(np.int64))


def subset_metrics(scored: ScoredSet) -> dict[str, float]:
    out = {}
    for name, s in (("all", scored), ("easy", scored.subset("easy")), ("hard", scored.subset("hard"))):
        try:
            m = s.metrics()
        except ValueError:
            continue
        out[f"{name}_auc"], out[f"{name}_eer"] = m["auc"], m["eer"]
    return out


# prefix-head dump -------------------------------------------------------------------

DUMP_HEADER = ("t", "anchor_prefix", "spoken_prefix", "truth", "match_prob")


def dump_subsequence_predictions(model, corpus: Corpus, i: int) -> list[tuple]:
    """One row per head t = 1..T (1-based, as printed) for sample ``i``."""
    from .model import make_batch

    if not model.full:
        raise ValueError("prefix heads were stripped; dumping needs the full checkpoint")
    batch = make_batch(corpus, [i], model.dtype)
    _, C = model.attend(batch)
    probs = match_score(model.matcher.subsequence_heads(C))[0]
    sample = corpus.sample(i)
    vocab = corpus.vocab
    labels = subsequence_labels(sample.anchor, sample.spoken)
    rows = []
    for t in range(sample.anchor.T):
        anchor_pre = " ".join(vocab.decode(sample.anchor.phonemes[: t + 1]))
        spoken_pre = " ".join(vocab.decode(sample.spoken[: t + 1]))
        rows.append((t + 1, anchor_pre, spoken_pre, LABEL_NAMES[int(labels[t])], float(probs[t])))
    return rows


def rows_to_csv(rows, header=DUMP_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ablation ------------------------------------------------------------------------------

def method_name(alpha) -> str:
    a1, a2, a3 = alpha
    if a2 > 0 and a3 > 0:
        return "full"
    if a2 == 0 and a3 > 0:
        return "w/o L_ss"
    if a2 == 0 and a3 == 0:
        return "w/o L_ss, w/o L_CTC"
    return f"alpha={a1:g},{a2:g},{a3:g}"


def ablation_table(entries: list[dict]) -> list[dict]:
    """Rows of AUC/EER per method on the hard and easy subsets.

    Each entry: {"name", "scored": ScoredSet, "fingerprint", "seed"}.  All
    entries must come from the same corpus and seed.
    """
    keys = {(e["fingerprint"], e["seed"]) for e in entries}
    if len(keys) > 1:
        raise ValueError(f"ablation entries disagree on corpus/seed: {sorted(keys)}")
    rows = []
    for e in entries:
        hard, easy = e["scored"].subset("hard").metrics(), e["scored"].subset("easy").metrics()
        rows.append({"method": e["name"], "hard_auc": hard["auc"], "easy_auc": easy["auc"],
                     "hard_eer": hard["eer"], "easy_eer": easy["eer"]})
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'Method':<22}| {'AUC hard':>9} {'AUC easy':>9} | {'EER hard':>9} {'EER easy':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['method']:<22}| {100 * r['hard_auc']:9.2f} {100 * r['easy_auc']:9.2f} | "
            f"{100 * r['hard_eer']:9.2f} {100 * r['easy_eer']:9.2f}"
        )
    return "\n".join(lines)

