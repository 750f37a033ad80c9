"""Command line: synth, train, eval, infer, inspect.

Options come from three layers, lowest first: built-in defaults, an INI
file given with ``--config`` (one section per command), then flags.  The
resolved options are written to ``resolved_config.ini`` in the output
directory of every command that writes files.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import frontend as fe
from . import trainer as tr
from .evaluation import (ablation_table, dump_subsequence_predictions, format_table, method_name,
                         roc_points, rows_to_csv, score_corpus, subset_metrics)
from .model import ModelConfig, pair_batch
from .storage import FormatError

log = logging.getLogger("kwsmatch")

REPORTED_PARAMS = 596_000


class CliError(Exception):
    pass


# option tables: name -> (type, default).  None defaults mean "not set".
SYNTH_OPTS = {
    **{f.name: (type(f.default), f.default) for f in fields(fe.GenConfig) if f.name != "seed"},
    "positive": (int, 2000), "easy": (int, 2000), "hard": (int, 2000),
    # phoneme prototypes; --seed only drives sampling, so train and test corpora share acoustics
    "acoustic_seed": (int, 0),
}
TRAIN_OPTS = {
    "corpus": (str, None), "preset": (str, "desk"), "resume": (str, None),
    "alpha1": (float, 2.0), "alpha2": (float, 1.0), "alpha3": (float, 5.0),
    # None: take the preset's value
    "epochs": (int, None), "batch_size": (int, None), "warmup": (int, None), "lr_scale": (float, None),
    "val_fraction": (float, 0.1), "max_steps": (int, None), "dtype": (str, "float32"),
}
EVAL_OPTS = {"corpus": (str, None), "batch_size": (int, 128), "roc": (bool, False)}
INFER_OPTS = {"checkpoint": (str, None), "lexicon": (str, None), "keyword": (str, None),
              "audio": (str, None), "corpus": (str, None), "index": (int, None)}
INSPECT_OPTS = {"checkpoint": (str, None), "large_preset": (bool, False)}
OPTIONS = {"synth": SYNTH_OPTS, "train": TRAIN_OPTS, "eval": EVAL_OPTS, "infer": INFER_OPTS,
           "inspect": INSPECT_OPTS}


def _parse_value(kind, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise CliError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes", "on")
    return kind(text)


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the INI section for ``command``, then explicit flags."""
    table = OPTIONS[command]
    resolved = {k: default for k, (_, default) in table.items()}
    if args.config:
        ini = configparser.ConfigParser()
        if not ini.read(args.config):
            raise CliError(f"cannot read config file {args.config}")
        if ini.has_section(command):
            for key, text in ini.items(command):
                key = key.replace("-", "_")
                if key not in table:
                    raise CliError(f"[{command}] unknown option {key!r}")
                try:
                    resolved[key] = _parse_value(table[key][0], text)
                except ValueError as exc:
                    raise CliError(f"[{command}] {key}: {exc}") from None
    for key in table:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            resolved[key] = val
    resolved["seed"] = args.seed if args.seed is not None else 0
    log.info("resolved %s config: %s", command, resolved)
    return resolved


def write_resolved(out: Path, command: str, resolved: dict, extra: dict | None = None):
    ini = configparser.ConfigParser()
    ini[command] = {k: "" if v is None else str(v) for k, v in sorted(resolved.items())}
    for k, v in (extra or {}).items():
        ini[command][k] = str(v)
    with open(out / "resolved_config.ini", "w", encoding="utf-8") as fh:
        ini.write(fh)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _load_ckpt(path) -> tr.Checkpoint:
    try:
        return tr.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None


def _load_corpus(path) -> fe.Corpus:
    if not path:
        raise CliError("no corpus given (--corpus or 'corpus' in the config file)")
    try:
        return fe.load_corpus(path)
    except FileNotFoundError:
        raise CliError(f"corpus not found: {path}") from None


def _emit(pairs: dict):
    """Machine-readable key=value lines on stdout."""
    for k, v in pairs.items():
        print(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")


# commands -----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    r = resolve("synth", args)
    gen = fe.GenConfig(**{f.name: r[f.name] for f in fields(fe.GenConfig) if f.name != "seed"},
                       seed=r["acoustic_seed"])
    try:
        gen.validate()
    except ValueError as exc:
        raise CliError(f"infeasible generation config: {exc}") from None
    counts = {k: r[k] for k in fe.PAIR_KINDS}
    if any(c < 0 for c in counts.values()):
        raise CliError("pair counts must be non-negative")
    out = _out_dir(args)
    corpus = fe.generate_corpus(gen, counts, seed=r["seed"])
    try:
        fe.save_corpus(corpus, out / "corpus.bin")
        fe.write_lexicon(out / "lexicon.tsv", fe.corpus_lexicon(corpus))
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc.strerror}") from None
    write_resolved(out, "synth", r)
    hist = fe.keyword_length_histogram(
        corpus.anchors[i, : corpus.valid_len[i]] for i in range(len(corpus)))
    _emit({"records": len(corpus), **{f"count_{k}": int(np.sum(corpus.kinds == j))
                                      for j, k in enumerate(fe.PAIR_KINDS)},
           "fingerprint": corpus.fingerprint()})
    print("keyword_length_histogram (phonemes: count)")
    peak = max(hist.values()) if hist else 1
    for length, count in hist.items():
        print(f"{length:>3}: {count:>6} {'#' * max(1, round(40 * count / peak))}")
    return 0


def _train_config(r: dict) -> tr.TrainConfig:
    if r["preset"] not in ("desk", "large"):
        raise CliError(f"unknown preset {r['preset']!r} (desk or large)")
    base = tr.desk_config() if r["preset"] == "desk" else tr.large_config()
    preset = {k: r[k] for k in ("epochs", "batch_size", "warmup", "lr_scale") if r[k] is not None}
    cfg = replace(base, alpha=(r["alpha1"], r["alpha2"], r["alpha3"]), **preset,
                  val_fraction=r["val_fraction"], max_steps=r["max_steps"], dtype=r["dtype"],
                  seed=r["seed"])
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return cfg


def cmd_train(args) -> int:
    r = resolve("train", args)
    corpus = _load_corpus(r["corpus"])
    resume = _load_ckpt(r["resume"]) if r["resume"] else None
    cfg = _train_config(r)
    if resume is not None:
        # a resumed run keeps the architecture it started with
        cfg = replace(cfg, encoder=resume.train_config().encoder,
                      matcher=resume.train_config().matcher)
    if cfg.encoder.input_dim != corpus.gen.feature_dim:
        cfg = replace(cfg, encoder=replace(cfg.encoder, input_dim=corpus.gen.feature_dim))
    out = _out_dir(args)
    write_resolved(out, "train", r, {"train_config": json.dumps(cfg.to_dict(), sort_keys=True)})
    metrics = open(out / "metrics.jsonl", "w", encoding="utf-8")

    def report(rec):
        metrics.write(json.dumps(rec, sort_keys=True) + "\n")
        metrics.flush()
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in rec.items()), flush=True)

    try:
        ckpt, _ = tr.train(corpus, cfg, resume=resume, callback=report)
    except tr.TrainingDiverged as exc:
        tr.save_checkpoint(exc.checkpoint, out / "last_good.ckpt")
        raise CliError(f"training diverged: {exc}; last good checkpoint in "
                       f"{out / 'last_good.ckpt'}") from None
    finally:
        metrics.close()
    tr.save_checkpoint(ckpt, out / "checkpoint.ckpt")
    tr.save_checkpoint(tr.strip_for_inference(ckpt), out / "inference.ckpt")
    _emit({"checkpoint": out / "checkpoint.ckpt", "inference_checkpoint": out / "inference.ckpt",
           "step": ckpt.step,
           "method": method_name(cfg.alpha)})
    return 0


def cmd_eval(args) -> int:
    r = resolve("eval", args)
    if not args.checkpoint:
        raise CliError("eval needs at least one --checkpoint")
    corpus = _load_corpus(r["corpus"])
    ckpts = [(p, _load_ckpt(p)) for p in args.checkpoint]
    dumps = args.dump_subseq or []
    if dumps and ckpts[0][1].stripped:
        raise CliError("--dump-subseq needs the full checkpoint; the prefix heads of "
                       f"{ckpts[0][0]} were stripped for inference")
    out = _out_dir(args) if (args.out or dumps or r["roc"]) else None
    if out is not None:
        write_resolved(out, "eval", r, {"checkpoint": " ".join(args.checkpoint)})
    entries = []
    for path, ckpt in ckpts:
        model = ckpt.build_model()
        scored = score_corpus(model, corpus, r["batch_size"])
        alpha = tuple(ckpt.config["train"]["alpha"])
        entries.append({"name": method_name(alpha), "scored": scored,
                        "fingerprint": ckpt.meta.get("corpus"), "seed": ckpt.meta.get("seed")})
        print(f"# {path}")
        _emit({"method": method_name(alpha), **subset_metrics(scored)})
        if r["roc"]:
            np.savetxt(out / f"roc_{Path(path).stem}.csv", roc_points(scored.scores, scored.truth),
                       delimiter=",", header="threshold,far,tpr", comments="")
    for i in dumps:
        if not 0 <= i < len(corpus):
            raise CliError(f"--dump-subseq index {i} outside corpus of {len(corpus)}")
        rows = dump_subsequence_predictions(ckpts[0][1].build_model(), corpus, i)
        (out / f"subseq_{i}.csv").write_text(rows_to_csv(rows), encoding="utf-8")
        print(f"# wrote {out / f'subseq_{i}.csv'}")
    if len(entries) > 1:
        try:
            rows = ablation_table(entries)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        print(format_table(rows))
    return 0


def cmd_infer(args) -> int:
    r = resolve("infer", args)
    for key in ("checkpoint", "lexicon", "keyword"):
        if not r[key]:
            raise CliError(f"infer needs --{key}")
    ckpt = _load_ckpt(r["checkpoint"])
    model = ckpt.build_model()
    if r["audio"]:
        frames = fe.load_audio(r["audio"])
    elif r["corpus"] and r["index"] is not None:
        corpus = _load_corpus(r["corpus"])
        if not 0 <= r["index"] < len(corpus):
            raise CliError(f"--index {r['index']} outside corpus of {len(corpus)}")
        frames = corpus.frames[r["index"]]
    else:
        raise CliError("infer needs --audio, or --corpus with --index")
    try:
        ids = fe.lexicon_lookup(r["keyword"], fe.read_lexicon(r["lexicon"]), model.vocab)
        anchor = fe.pad_anchor(ids, model.cfg.matcher.max_len, model.vocab.pad_id)
    except (fe.UnknownWord, fe.LengthExceeded) as exc:
        raise CliError(str(exc)) from None
    score = float(model.score(pair_batch(frames, anchor, model.dtype))[0])
    _emit({"score": score})
    return 0


def cmd_inspect(args) -> int:
    r = resolve("inspect", args)
    if r["checkpoint"]:
        ckpt = _load_ckpt(r["checkpoint"])
        print(f"# {r['checkpoint']} (step {ckpt.step}, {'stripped' if ckpt.stripped else 'full'})")
        _emit(tr.parameter_report(ckpt))
    if r["large_preset"]:
        cfg = tr.large_config()
        vocab = fe.PhonemeVocab(fe.ARPABET)
        model_cfg = ModelConfig(vocab.symbols, cfg.encoder, cfg.matcher)
        report = tr.parameter_report(tr.init_checkpoint(model_cfg, cfg))
        print(f"# large preset, {len(vocab)} phonemes, reported figure {REPORTED_PARAMS}")
        _emit({**report, "reported": REPORTED_PARAMS})
    if not r["checkpoint"] and not r["large_preset"]:
        raise CliError("inspect needs --checkpoint and/or --large-preset")
    return 0


# parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file, one section per command")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="kwsmatch", parents=[common],
                                description="Text-audio keyword matching on synthetic phoneme audio.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a corpus and lexicon")
    for name, (kind, _) in SYNTH_OPTS.items():
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a model")
    for name, (kind, _) in TRAIN_OPTS.items():
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="AUC/EER, prefix dumps, ablation table")
    e.add_argument("--checkpoint", action="append", help="repeat for an ablation table")
    e.add_argument("--corpus")
    e.add_argument("--batch-size", dest="batch_size", type=int)
    e.add_argument("--dump-subseq", dest="dump_subseq", type=int, action="append",
                   help="sample index whose prefix predictions go to CSV")
    e.add_argument("--roc", action="store_true", help="write ROC points as CSV")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="score one audio/keyword pair")
    for name, (kind, _) in INFER_OPTS.items():
        i.add_argument("--" + name, dest=name, type=kind)
    i.set_defaults(func=cmd_infer)

    n = sub.add_parser("inspect", parents=[common], help="parameter counts")
    n.add_argument("--checkpoint")
    n.add_argument("--large-preset", dest="large_preset", action="store_true")
    n.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FormatError, ValueError) as exc:
        print(f"kwsmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"kwsmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
