"""Full keyword spotter: encoder + CTC head + matcher, and batch assembly."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .encoder import AudioEncoder, CtcHead, EncoderConfig, ctc_loss
from .frontend import Corpus, PaddedAnchor, PhonemeVocab, subsequence_labels
from .matcher import Matcher, MatcherConfig, match_score, subsequence_loss, utterance_loss


@dataclass
class ModelConfig:
    vocab: tuple[str, ...]
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)

    def validate(self):
        self.encoder.validate()
        self.matcher.validate()
        if self.encoder.dim != self.matcher.hidden:
            raise ValueError(
                f"audio embedding dim {self.encoder.dim} must equal matcher hidden "
                f"{self.matcher.hidden} (audio rows are the keys/values)"
            )

    def to_dict(self) -> dict:
        return {"vocab": list(self.vocab), "encoder": asdict(self.encoder),
                "matcher": asdict(self.matcher)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(tuple(d["vocab"]), EncoderConfig(**d["encoder"]), MatcherConfig(**d["matcher"]))


@dataclass
class Batch:
    frames: np.ndarray        # (B, n_max, F), right-padded with zeros
    lengths: np.ndarray       # (B,)
    anchors: np.ndarray       # (B, T)
    valid_len: np.ndarray     # (B,)
    spoken: list              # per-sample label arrays (CTC targets)
    utt_labels: np.ndarray    # (B,)
    ss_labels: np.ndarray     # (B, T) with INVALID past valid_len
    kinds: np.ndarray         # (B,)

    @property
    def frame_mask(self) -> np.ndarray | None:
        n_max = self.frames.shape[1]
        if np.all(self.lengths == n_max):
            return None
        return np.arange(n_max)[None, :] < self.lengths[:, None]

    def __len__(self):
        return len(self.lengths)


def make_batch(corpus: Corpus, idx, dtype=np.float64) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    frames = [corpus.frames[i] for i in idx]
    lengths = np.array([len(f) for f in frames], dtype=np.int64)
    F = corpus.gen.feature_dim
    out = np.zeros((len(idx), lengths.max(), F), dtype=dtype)
    for b, f in enumerate(frames):
        out[b, : len(f)] = f
    anchors = corpus.anchors[idx].astype(np.int64)
    valid = corpus.valid_len[idx].astype(np.int64)
    spoken = [corpus.spoken[i] for i in idx]
    ss = np.stack([subsequence_labels(PaddedAnchor(a, int(v)), s)
                   for a, v, s in zip(anchors, valid, spoken)]).astype(np.int64)
    utt = np.array([int(np.array_equal(a[:v], s)) for a, v, s in zip(anchors, valid, spoken)])
    return Batch(out, lengths, anchors, valid, spoken, utt, ss, corpus.kinds[idx].astype(np.int64))


def pair_batch(frames: np.ndarray, anchor: PaddedAnchor, dtype=np.float64) -> Batch:
    """A one-pair batch for scoring; spoken text is unknown, so no labels."""
    frames = np.asarray(frames, dtype=dtype)
    if frames.ndim != 2 or len(frames) == 0:
        raise ValueError(f"audio must be a non-empty (n, F) frame array, got shape {frames.shape}")
    T = anchor.T
    return Batch(frames[None], np.array([len(frames)]), anchor.ids[None].astype(np.int64),
                 np.array([anchor.valid_len]), [None], np.array([-1]),
                 np.full((1, T), -1, dtype=np.int64), np.array([-1]))


class KeywordSpotter:
    """Holds every trainable tensor under a stable dotted name.

    An inference-only instance (``full=False``) has no CTC head and no
    prefix heads; its utterance path is identical to the full model's.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64, full: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.full = full
        vocab = PhonemeVocab(cfg.vocab)
        self.vocab = vocab
        # one generator per sub-module keeps names stable if a sub-module is dropped
        self.encoder = AudioEncoder(np.random.default_rng([seed, 1]), cfg.encoder, dtype)
        self.matcher = Matcher(np.random.default_rng([seed, 2]), cfg.matcher, vocab.table_rows,
                               (vocab.blank_id, vocab.pad_id), dtype, with_subsequence_heads=full)
        self.ctc_head = CtcHead(np.random.default_rng([seed, 3]), cfg.encoder.dim, len(vocab),
                                dtype) if full else None

    def named_parameters(self) -> dict[str, tn.Tensor]:
        out = dict(self.encoder.named_parameters("encoder."))
        out.update(self.matcher.named_parameters("matcher."))
        if self.ctc_head is not None:
            out.update(self.ctc_head.named_parameters("ctc_head."))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)[:5]}...")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype, copy=True)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    # forward ------------------------------------------------------------------------

    def attend(self, batch: Batch):
        mask = batch.frame_mask
        audio = self.encoder(batch.frames.astype(self.dtype), mask)
        C = self.matcher.cross_attend(self.matcher.query(batch.anchors), audio, mask)
        return audio, C

    def utterance_logits(self, batch: Batch) -> tn.Tensor:
        _, C = self.attend(batch)
        return self.matcher.utterance_head(C)

    def score(self, batch: Batch) -> np.ndarray:
        return match_score(self.utterance_logits(batch))

    def losses(self, batch: Batch, need=(True, True, True)):
        """(L_utt, L_ss, L_ctc, info) for one batch; unneeded terms are None."""
        if not self.full:
            raise RuntimeError("training losses need the full (unstripped) model")
        audio, C = self.attend(batch)
        utt_logits = self.matcher.utterance_head(C)
        l_utt = utterance_loss(utt_logits, batch.utt_labels)
        l_ss = subsequence_loss(self.matcher.subsequence_heads(C), batch.ss_labels) if need[1] else None
        l_ctc, feasible = None, None
        if need[2]:
            logits = self.ctc_head(audio)
            l_ctc, feasible = ctc_loss(logits, batch.spoken, batch.lengths, blank=self.vocab.blank_id)
        info = {"scores": match_score(utt_logits), "ctc_feasible": feasible}
        return l_utt, l_ss, l_ctc, info
