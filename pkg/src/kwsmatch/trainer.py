"""Multi-task training, optimiser, checkpoints and inference stripping."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import storage
from . import tensor as tn
from .encoder import EncoderConfig
from .evaluation import score_corpus, subset_metrics
from .frontend import Corpus
from .matcher import MatcherConfig
from .model import KeywordSpotter, ModelConfig, make_batch

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KWSCKPT\0"


class NonFiniteLoss(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    alpha: tuple[float, float, float] = (2.0, 1.0, 5.0)
    batch_size: int = 64
    epochs: int = 30
    warmup: int = 500
    lr_scale: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    dtype: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None
    eval_every: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)

    def validate(self):
        if any(a < 0 for a in self.alpha) or len(self.alpha) != 3:
            raise ValueError(f"alpha must be three non-negative weights, got {self.alpha}")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup < 1:
            raise ValueError("need batch_size >= 1, epochs >= 0, warmup >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["alpha"] = tuple(d["alpha"])
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["matcher"] = MatcherConfig(**d["matcher"])
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """The small CPU setup: D=16, one conformer layer, two matcher layers."""
    # lr_scale 0.5: at 1.0 the D=16 model's peak rate (~0.011) makes validation AUC oscillate
    cfg = TrainConfig(
        lr_scale=0.5,
        encoder=EncoderConfig(input_dim=16, layers=1, dim=16, conv_kernel=7, ff_expansion=2, heads=4),
        matcher=MatcherConfig(hidden=16, filter=32, layers=2, heads=4, max_len=25),
    )
    return replace(cfg, **overrides)


def large_config(input_dim: int = 64, **overrides) -> TrainConfig:
    """Full-scale sizes: batch 1024, 300 epochs, D=64 conformer and matcher."""
    cfg = TrainConfig(batch_size=1024, epochs=300,
                      encoder=EncoderConfig(input_dim=input_dim), matcher=MatcherConfig())
    return replace(cfg, **overrides)


# loss, schedule, optimiser -----------------------------------------------------------

def total_loss(l_utt, l_ss, l_ctc, alpha=(2.0, 1.0, 5.0)):
    """alpha1*L_utt + alpha2*L_ss + alpha3*L_ctc.

    Terms may be Tensors or floats; zero-weighted terms may be None.  Returns
    a Tensor when any weighted term is a Tensor, else a float.
    """
    terms, weights = [], []
    for name, t, a in zip(("L_utt", "L_ss", "L_ctc"), (l_utt, l_ss, l_ctc), alpha):
        if a == 0:
            continue
        if t is None:
            raise ValueError(f"{name} has weight {a} but was not computed")
        v = t.item() if isinstance(t, tn.Tensor) else float(t)
        if math.isnan(v) or math.isinf(v):
            raise NonFiniteLoss(f"{name} is {v}; aborting step")
        terms.append(t)
        weights.append(a)
    if not terms:
        return 0.0
    if any(isinstance(t, tn.Tensor) for t in terms):
        return tn.weighted_sum([tn.as_tensor(t) for t in terms], weights)
    return float(sum(w * float(t) for w, t in zip(weights, terms)))


def lr_schedule(step: int, warmup: int, d_model: int, scale: float = 1.0) -> float:
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(params, grads, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over dicts of arrays; returns new (params, m, v).

    A missing or None gradient is treated as zero.
    """
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        mk = beta1 * m[k] + (1.0 - beta1) * g
        vk = beta2 * v[k] + (1.0 - beta2) * g * g
        update = lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
        new_p[k] = (p - update).astype(p.dtype)
        new_m[k], new_v[k] = mk.astype(p.dtype), vk.astype(p.dtype)
    return new_p, new_m, new_v


# checkpoints ------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    config: dict                     # {"model": ..., "train": ...}
    meta: dict = field(default_factory=dict)

    @property
    def stripped(self) -> bool:
        return bool(self.meta.get("stripped", False))

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config["train"])

    def build_model(self) -> KeywordSpotter:
        dtype = np.dtype(next(iter(self.params.values())).dtype)
        model = KeywordSpotter(self.model_config(), dtype=dtype, full=not self.stripped)
        model.load_state(self.params)
        return model

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def save_checkpoint(ckpt: Checkpoint, path):
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"m/{k}": v for k, v in ckpt.m.items()})
    arrays.update({f"v/{k}": v for k, v in ckpt.v.items()})
    meta = {"step": ckpt.step, "config": ckpt.config, "meta": ckpt.meta}
    storage.write_container(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = storage.read_container(path, CHECKPOINT_MAGIC)
    groups = {"param": {}, "m": {}, "v": {}}
    for key, arr in arrays.items():
        group, name = key.split("/", 1)
        groups[group][name] = arr
    return Checkpoint(groups["param"], groups["m"], groups["v"], meta["step"], meta["config"],
                      meta.get("meta", {}))


def _is_training_only(name: str) -> bool:
    return name.startswith("ctc_head.") or name.startswith("matcher.ss_heads.")


def strip_for_inference(ckpt: Checkpoint) -> Checkpoint:
    """Drop the CTC projection and every prefix head; idempotent."""
    if ckpt.stripped:
        return ckpt
    keep = {k: v.copy() for k, v in ckpt.params.items() if not _is_training_only(k)}
    meta = dict(ckpt.meta, stripped=True)
    return Checkpoint(keep, {}, {}, ckpt.step, ckpt.config, meta)


def parameter_report(ckpt: Checkpoint) -> dict[str, int]:
    """Element counts per top-level component, plus totals."""
    report: dict[str, int] = {}
    for name, arr in ckpt.params.items():
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] == "matcher" else parts[0]
        if group == "matcher.ss_heads":
            group = "matcher.ss_heads (training only)"
        elif group == "ctc_head":
            group = "ctc_head (training only)"
        report[group] = report.get(group, 0) + int(arr.size)
    report["total"] = ckpt.num_parameters()
    report["stripped_total"] = strip_for_inference(ckpt).num_parameters()
    return report


# training ----------------------------------------------------------------------------------

def split_indices(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng([seed, 11]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def epoch_batches(lengths: np.ndarray, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled batches of similar audio length (less padding), fixed by (seed, epoch)."""
    rng = np.random.default_rng([seed, 13, epoch])
    perm = rng.permutation(len(lengths))
    pool = batch_size * 16
    batches = []
    for start in range(0, len(perm), pool):
        chunk = perm[start:start + pool]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def init_checkpoint(model_cfg: ModelConfig, cfg: TrainConfig, meta=None) -> Checkpoint:
    model = KeywordSpotter(model_cfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    params = model.state()
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    config = {"model": model_cfg.to_dict(), "train": cfg.to_dict()}
    return Checkpoint(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, config,
                      dict(meta or {}))


def train_step(model: KeywordSpotter, batch, cfg: TrainConfig):
    """Forward + backward; returns (component losses, total, grads)."""
    need = (True, cfg.alpha[1] > 0, cfg.alpha[2] > 0)
    for p in model.named_parameters().values():
        p.grad = None
    l_utt, l_ss, l_ctc, info = model.losses(batch, need)
    total = total_loss(l_utt, l_ss, l_ctc, cfg.alpha)
    total.backward()
    grads = {k: p.grad for k, p in model.named_parameters().items()}
    values = {
        "L_utt": l_utt.item(),
        "L_ss": l_ss.item() if l_ss is not None else float("nan"),
        "L_ctc": l_ctc.item() if l_ctc is not None else float("nan"),
        "total": total.item(),
        "correct": float(np.sum((info["scores"] > 0.5) == (batch.utt_labels == 1))),
    }
    return values, grads


def train(corpus: Corpus, cfg: TrainConfig, resume: Checkpoint | None = None,
          val_corpus: Corpus | None = None, callback=None):
    """Train on ``corpus``; returns (checkpoint, per-epoch history).

    Without ``val_corpus`` a ``val_fraction`` share of ``corpus`` (fixed by
    the seed) is held out.  The run is a deterministic function of the
    corpus, config and seed; resuming from a checkpoint written at step k
    reproduces the uninterrupted run exactly.
    """
    cfg.validate()
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    if corpus.valid_len.max() > cfg.matcher.max_len:
        raise ValueError("corpus holds keywords longer than the matcher's T")
    model_cfg = ModelConfig(corpus.vocab.symbols, cfg.encoder, cfg.matcher)
    if val_corpus is None and cfg.val_fraction > 0:
        tr_idx, va_idx = split_indices(len(corpus), cfg.val_fraction, cfg.seed)
        train_set, val_set = corpus.subset(tr_idx), corpus.subset(va_idx)
    else:
        train_set, val_set = corpus, val_corpus
    meta = {"corpus": corpus.fingerprint(), "seed": cfg.seed, "history": []}
    ckpt = resume if resume is not None else init_checkpoint(model_cfg, cfg, meta)
    if ckpt.stripped:
        raise ValueError("cannot resume training from a stripped checkpoint")
    history = list(ckpt.meta.get("history", []))
    model = ckpt.build_model()
    params, m, v = ckpt.params, ckpt.m, ckpt.v
    lengths = np.array([len(f) for f in train_set.frames])
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    last_step = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        last_step = min(last_step, cfg.max_steps)
    step = ckpt.step
    dtype = np.dtype(cfg.dtype)

    empty = {"L_utt": 0.0, "L_ss": 0.0, "L_ctc": 0.0, "total": 0.0, "correct": 0.0, "seen": 0}
    # running sums of a partly finished epoch survive a checkpoint/resume
    sums = dict(ckpt.meta.get("epoch_sums") or empty)

    def snapshot():
        meta = dict(ckpt.meta, history=list(history), epoch_sums=dict(sums))
        return Checkpoint({k: a.copy() for k, a in params.items()},
                          {k: a.copy() for k, a in m.items()}, {k: a.copy() for k, a in v.items()},
                          step, ckpt.config, meta)

    if step == 0 and not history and val_set is not None and len(val_set):
        rec = {"epoch": 0, "step": 0}
        rec.update({f"val_{k}": x for k, x in subset_metrics(score_corpus(model, val_set)).items()})
        history.append(rec)

    while step < last_step:
        epoch = step // steps_per_epoch
        batches = epoch_batches(lengths, cfg.batch_size, cfg.seed, epoch)
        for idx in batches[step - epoch * steps_per_epoch:]:
            if step >= last_step:
                break
            batch = make_batch(train_set, idx, dtype)
            try:
                values, grads = train_step(model, batch, cfg)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(f"step {step + 1}: {exc}", snapshot()) from exc
            step += 1
            lr = lr_schedule(step, cfg.warmup, cfg.encoder.dim, cfg.lr_scale)
            params, m, v = adam_step(params, grads, m, v, step, lr, cfg.beta1, cfg.beta2,
                                     cfg.adam_eps)
            model.load_state(params)
            for k in values:
                sums[k] += values[k] * (1 if k == "correct" else len(idx))
            sums["seen"] += len(idx)
        if step < (epoch + 1) * steps_per_epoch:
            # stopped by max_steps inside an epoch: the running sums stay in
            # the checkpoint so a resumed run reports the same epoch record
            log.info("stopped at step %d inside epoch %d", step, epoch + 1)
            break
        rec = {"epoch": epoch + 1, "step": step,
               "lr": lr_schedule(step, cfg.warmup, cfg.encoder.dim, cfg.lr_scale)}
        seen = sums["seen"]
        if seen:
            rec.update({k: sums[k] / seen for k in ("L_utt", "L_ss", "L_ctc", "total")})
            rec["train_acc"] = sums["correct"] / seen
        sums = dict(empty)
        if val_set is not None and len(val_set) and (epoch + 1) % cfg.eval_every == 0:
            rec.update({f"val_{k}": x for k, x in subset_metrics(score_corpus(model, val_set)).items()})
        history.append(rec)
        log.info("epoch %d step %d %s", epoch + 1, step,
                 " ".join(f"{k}={x:.4f}" for k, x in rec.items() if isinstance(x, float)))
        if callback is not None:
            callback(rec)
    return snapshot(), history
