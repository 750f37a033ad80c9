"""Phoneme text handling and the synthetic paired corpus.

ID layout for a vocabulary of V phonemes: phonemes are 0..V-1, the CTC
blank is V (the last logit class) and the pad symbol is V+1.  The P2V table
therefore has V+2 rows, of which the blank and pad rows stay zero.

Subsequence positions are 0-based: position ``t`` covers the first ``t+1``
phonemes, i.e. it corresponds to the head that reads ``t+1`` rows.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import storage
from . import tensor as tn

# ARPAbet consonants and stressed vowels; the first ``vocab_size`` entries
# are used by synthetic corpora.
ARPABET = (
    "S ER1 V AH0 F T K N L R M D P B G Z IH1 IY1 EH1 AE1 AA1 AO1 UW1 UH1 EY1 AY1 OW1 AW1 OY1 "
    "HH W Y JH CH SH ZH TH DH NG AH1 ER0 IH0 IY0 EH2 AE2 AA2 AO2 UW0 EY2 AY2 OW0 AW2 OY2 AH2"
).split()

MISMATCH, MATCH, INVALID = 0, 1, -1
LABEL_NAMES = {MISMATCH: "mismatch", MATCH: "match", INVALID: "invalid"}
PAIR_KINDS = ("positive", "easy", "hard")


class LengthExceeded(ValueError):
    pass


class UnknownWord(KeyError):
    def __str__(self):
        return f"word not in lexicon: {self.args[0]!r}"


@dataclass(frozen=True)
class PhonemeVocab:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("phoneme symbols must be unique")
        if not self.symbols:
            raise ValueError("empty phoneme vocabulary")

    @classmethod
    def default(cls, size: int) -> "PhonemeVocab":
        if not 1 <= size <= len(ARPABET):
            raise ValueError(f"vocab size must be in [1, {len(ARPABET)}], got {size}")
        return cls(tuple(ARPABET[:size]))

    def __len__(self):
        return len(self.symbols)

    @property
    def blank_id(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return len(self.symbols) + 1

    @property
    def table_rows(self) -> int:
        return len(self.symbols) + 2

    def encode(self, symbols: Iterable[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.symbols)}
        try:
            return np.array([index[s] for s in symbols], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"phoneme {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


# lexicon -------------------------------------------------------------------------

def read_lexicon(path) -> dict[str, list[str]]:
    """``word<TAB>PH1 PH2 ...`` per line; blank lines and '#' comments skipped."""
    lex = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            word, prons = line.split("\t", 1)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected word<TAB>phonemes") from None
        lex[word.strip()] = prons.split()
    return lex


def write_lexicon(path, lexicon: dict[str, Sequence[str]]):
    lines = [f"{w}\t{' '.join(p)}" for w, p in sorted(lexicon.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def lexicon_lookup(words, lexicon: dict[str, Sequence[str]], vocab: PhonemeVocab) -> np.ndarray:
    """Concatenated phoneme IDs of a keyword; no guessing for unknown words."""
    if isinstance(words, str):
        words = words.split()
    symbols: list[str] = []
    for w in words:
        if w not in lexicon:
            raise UnknownWord(w)
        symbols.extend(lexicon[w])
    return vocab.encode(symbols)


def word_for(ids: Sequence[int], vocab: PhonemeVocab) -> str:
    """Spelling used for synthetic keywords: lower-cased phonemes joined by '-'."""
    return "-".join(s.lower() for s in vocab.decode(ids))


# anchors and labels ------------------------------------------------------------------

@dataclass(frozen=True)
class PaddedAnchor:
    ids: np.ndarray
    valid_len: int

    @property
    def T(self) -> int:
        return len(self.ids)

    @property
    def phonemes(self) -> np.ndarray:
        return self.ids[: self.valid_len]


def pad_anchor(seq: Sequence[int], T: int, pad_id: int) -> PaddedAnchor:
    seq = np.asarray(seq, dtype=np.int64)
    if len(seq) == 0:
        raise ValueError("empty keyword: need at least one phoneme")
    if len(seq) > T:
        raise LengthExceeded(
            f"keyword has {len(seq)} phonemes; the maximum supported keyword length is T={T}"
        )
    ids = np.full(T, pad_id, dtype=np.int64)
    ids[: len(seq)] = seq
    return PaddedAnchor(ids, len(seq))


def embed_anchor(anchor: PaddedAnchor, table: tn.Tensor, pad_id: int, frozen=None) -> tn.Tensor:
    """(T, D) rows of the P2V table; padded rows come from the all-zero pad row."""
    if np.any(table.data[pad_id] != 0):
        raise ValueError("P2V pad row must be all zeros")
    frozen = (pad_id,) if frozen is None else frozen
    return tn.embedding(anchor.ids, table, frozen)


def subsequence_labels(anchor: PaddedAnchor, spoken: Sequence[int]) -> np.ndarray:
    """Per-position MATCH / MISMATCH / INVALID for every anchor prefix.

    Position t < valid_len is MATCH iff the first t+1 anchor phonemes equal
    the first t+1 spoken phonemes (a spoken text shorter than the prefix is
    a MISMATCH); positions at or past valid_len are INVALID.
    """
    spoken = np.asarray(spoken)
    labels = np.full(anchor.T, INVALID, dtype=np.int8)
    v = anchor.valid_len
    m = min(v, len(spoken))
    eq = anchor.ids[:m] == spoken[:m]
    # first disagreement ends the matching run
    run = m if eq.all() else int(np.argmin(eq))
    labels[:v] = MISMATCH
    labels[:run] = MATCH
    return labels


def keyword_length_histogram(keywords: Iterable[Sequence]) -> dict[int, int]:
    return dict(sorted(Counter(len(k) for k in keywords).items()))


# synthetic corpus ----------------------------------------------------------------------

@dataclass
class GenConfig:
    vocab_size: int = 12
    min_len: int = 3
    max_len: int = 12
    T: int = 25
    frames_min: int = 4
    frames_max: int = 12
    feature_dim: int = 16
    noise: float = 0.3
    seed: int = 0               # acoustic prototypes only; sampling takes its own seed

    def validate(self):
        if self.vocab_size < 4:
            # a hard-negative substitute must differ from the original and both neighbours
            raise ValueError("vocab_size must be >= 4 to build hard negatives without repeats")
        if not 2 <= self.min_len <= self.max_len <= self.T:
            raise ValueError(
                f"need 2 <= min_len <= max_len <= T, got {self.min_len}, {self.max_len}, {self.T}"
            )
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        if self.feature_dim < 1 or self.noise < 0:
            raise ValueError("feature_dim must be positive and noise non-negative")


@dataclass
class PairSample:
    audio: np.ndarray
    anchor: PaddedAnchor
    spoken: np.ndarray
    pair_kind: str

    @property
    def utterance_label(self) -> int:
        same = np.array_equal(self.anchor.phonemes, self.spoken)
        return MATCH if same else MISMATCH


def prototypes(cfg: GenConfig) -> np.ndarray:
    """One fixed acoustic prototype per phoneme, shared by a whole corpus."""
    rng = np.random.default_rng([cfg.seed, 7919])
    return rng.normal(size=(cfg.vocab_size, cfg.feature_dim))


def sample_length(rng, cfg: GenConfig) -> int:
    # binomial: bounded, peaked in the middle of [min_len, max_len]
    return cfg.min_len + int(rng.binomial(cfg.max_len - cfg.min_len, 0.5))


def sample_keyword(rng, cfg: GenConfig, length=None, avoid_first=None) -> np.ndarray:
    """Random phoneme string without immediate repeats."""
    length = sample_length(rng, cfg) if length is None else length
    out = np.empty(length, dtype=np.int64)
    for i in range(length):
        banned = {out[i - 1]} if i else ({avoid_first} if avoid_first is not None else set())
        choices = [p for p in range(cfg.vocab_size) if p not in banned]
        out[i] = choices[rng.integers(len(choices))]
    return out


def hard_negative(rng, keyword: np.ndarray, cfg: GenConfig) -> np.ndarray:
    """1-2 substitutions at non-initial positions; position 0 is never touched."""
    L = len(keyword)
    if L < 2:
        raise ValueError("hard negatives need keywords of at least 2 phonemes")
    k = 1 if L < 3 else int(rng.integers(1, 3))
    positions = np.sort(rng.choice(np.arange(1, L), size=k, replace=False))
    out = keyword.copy()
    for pos in positions:
        banned = {keyword[pos], out[pos - 1]}
        if pos + 1 < L:
            banned.add(out[pos + 1])
        choices = [p for p in range(cfg.vocab_size) if p not in banned]
        out[pos] = choices[rng.integers(len(choices))]
    return out


def render_audio(rng, spoken: np.ndarray, protos: np.ndarray, cfg: GenConfig) -> np.ndarray:
    counts = rng.integers(cfg.frames_min, cfg.frames_max + 1, size=len(spoken))
    means = np.repeat(protos[spoken], counts, axis=0)
    return (means + cfg.noise * rng.normal(size=means.shape)).astype(np.float32)


def synth_pair(rng, cfg: GenConfig, pair_kind: str, protos=None) -> PairSample:
    if pair_kind not in PAIR_KINDS:
        raise ValueError(f"pair_kind must be one of {PAIR_KINDS}, got {pair_kind!r}")
    cfg.validate()
    protos = prototypes(cfg) if protos is None else protos
    anchor = sample_keyword(rng, cfg)
    if pair_kind == "positive":
        spoken = anchor.copy()
    elif pair_kind == "easy":
        spoken = sample_keyword(rng, cfg, avoid_first=anchor[0])
    else:
        spoken = hard_negative(rng, anchor, cfg)
    audio = render_audio(rng, spoken, protos, cfg)
    return PairSample(audio, pad_anchor(anchor, cfg.T, cfg.vocab_size + 1), spoken, pair_kind)


@dataclass
class Corpus:
    """Pairs stored column-wise; ``samples[i]`` views are built on demand."""

    gen: GenConfig
    frames: list[np.ndarray]
    anchors: np.ndarray          # (N, T) padded ids
    valid_len: np.ndarray        # (N,)
    spoken: list[np.ndarray]
    kinds: np.ndarray            # (N,) index into PAIR_KINDS
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def vocab(self) -> PhonemeVocab:
        return PhonemeVocab.default(self.gen.vocab_size)

    def sample(self, i: int) -> PairSample:
        anchor = PaddedAnchor(self.anchors[i].astype(np.int64), int(self.valid_len[i]))
        return PairSample(self.frames[i], anchor, self.spoken[i], PAIR_KINDS[self.kinds[i]])

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx, dtype=np.int64)
        return Corpus(self.gen, [self.frames[i] for i in idx], self.anchors[idx],
                      self.valid_len[idx], [self.spoken[i] for i in idx], self.kinds[idx],
                      self.seed, dict(self.meta))

    def utterance_labels(self) -> np.ndarray:
        return np.array([self.sample(i).utterance_label for i in range(len(self))], dtype=np.int64)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for f, s in zip(self.frames, self.spoken):
            h.update(f.tobytes())
            h.update(s.astype(np.int64).tobytes())
        h.update(self.anchors.astype(np.int64).tobytes())
        h.update(self.kinds.astype(np.int64).tobytes())
        return h.hexdigest()[:16]


def generate_corpus(cfg: GenConfig, counts: dict[str, int], seed: int) -> Corpus:
    """Deterministic in (cfg, counts, seed); sample i uses its own generator
    seeded by (seed, i), so any index range can be produced independently."""
    cfg.validate()
    protos = prototypes(cfg)
    kinds = [k for k in PAIR_KINDS for _ in range(counts.get(k, 0))]
    unknown = set(counts) - set(PAIR_KINDS)
    if unknown:
        raise ValueError(f"unknown pair kinds {sorted(unknown)}")
    order = np.random.default_rng([seed, 1]).permutation(len(kinds))
    samples = [
        synth_pair(np.random.default_rng([seed, 2, i]), cfg, kinds[j], protos)
        for i, j in enumerate(order)
    ]
    return Corpus(
        gen=cfg,
        frames=[s.audio for s in samples],
        anchors=np.stack([s.anchor.ids for s in samples]).astype(np.int32) if samples
        else np.zeros((0, cfg.T), np.int32),
        valid_len=np.array([s.anchor.valid_len for s in samples], dtype=np.int32),
        spoken=[s.spoken for s in samples],
        kinds=np.array([PAIR_KINDS.index(s.pair_kind) for s in samples], dtype=np.int8),
        seed=seed,
    )


def corpus_lexicon(corpus: Corpus) -> dict[str, list[str]]:
    vocab = corpus.vocab
    lex = {}
    for i in range(len(corpus)):
        for ids in (corpus.anchors[i, : corpus.valid_len[i]], corpus.spoken[i]):
            lex[word_for(ids, vocab)] = vocab.decode(ids)
    return lex


CORPUS_MAGIC = b"KWSCORP\0"
AUDIO_MAGIC = b"KWSAUDI\0"


def _offsets(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([len(p) for p in parts])]).astype(np.int64)


def save_corpus(corpus: Corpus, path):
    F = corpus.gen.feature_dim
    meta = {"gen": asdict(corpus.gen), "seed": corpus.seed, "size": len(corpus),
            "vocab": list(corpus.vocab.symbols), **corpus.meta}
    arrays = {
        "frames": np.concatenate(corpus.frames) if len(corpus) else np.zeros((0, F), np.float32),
        "frame_offsets": _offsets(corpus.frames),
        "anchors": corpus.anchors.astype(np.int32),
        "valid_len": corpus.valid_len.astype(np.int32),
        "spoken": np.concatenate(corpus.spoken).astype(np.int32) if len(corpus)
        else np.zeros(0, np.int32),
        "spoken_offsets": _offsets(corpus.spoken),
        "kinds": corpus.kinds.astype(np.int8),
    }
    storage.write_container(path, CORPUS_MAGIC, meta, arrays)


def load_corpus(path) -> Corpus:
    meta, a = storage.read_container(path, CORPUS_MAGIC)
    fo, so = a["frame_offsets"], a["spoken_offsets"]
    n = len(a["kinds"])
    extra = {k: v for k, v in meta.items() if k not in ("gen", "seed", "size", "vocab")}
    return Corpus(
        gen=GenConfig(**meta["gen"]),
        frames=[a["frames"][fo[i]:fo[i + 1]] for i in range(n)],
        anchors=a["anchors"], valid_len=a["valid_len"],
        spoken=[a["spoken"][so[i]:so[i + 1]].astype(np.int64) for i in range(n)],
        kinds=a["kinds"], seed=meta["seed"], meta=extra,
    )


def save_audio(frames: np.ndarray, path):
    storage.write_container(path, AUDIO_MAGIC, {"frames": list(frames.shape)},
                            {"frames": np.asarray(frames, np.float32)})


def load_audio(path) -> np.ndarray:
    return storage.read_container(path, AUDIO_MAGIC)[1]["frames"]
