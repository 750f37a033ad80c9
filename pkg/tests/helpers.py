"""Small models and batches shared by several test modules."""
import numpy as np

from kwsmatch import layers as L
from kwsmatch import tensor as tn
from kwsmatch.encoder import EncoderConfig
from kwsmatch.frontend import GenConfig, generate_corpus
from kwsmatch.matcher import MatcherConfig
from kwsmatch.model import KeywordSpotter, ModelConfig, make_batch
from kwsmatch.trainer import total_loss

TINY_GEN = GenConfig(vocab_size=5, min_len=2, max_len=3, T=4, frames_min=2, frames_max=2, feature_dim=3)


def tiny_model(seed=0, gen=TINY_GEN):
    corpus = generate_corpus(gen, {"positive": 2, "easy": 1, "hard": 1}, seed=seed)
    cfg = ModelConfig(corpus.vocab.symbols,
                      EncoderConfig(input_dim=gen.feature_dim, layers=1, dim=4, heads=2),
                      MatcherConfig(hidden=4, filter=6, layers=1, heads=2, max_len=gen.T))
    model = KeywordSpotter(cfg, seed=seed, dtype=np.float64)
    return model, make_batch(corpus, np.arange(len(corpus)))


def composite_grad_error(model, batch, rng, alpha=(2.0, 1.0, 5.0), max_entries=3):
    """Largest relative error of the full multi-task loss gradient, sampled per tensor."""
    named = model.named_parameters()

    def f():
        l_utt, l_ss, l_ctc, _ = model.losses(batch)
        return total_loss(l_utt, l_ss, l_ctc, alpha)

    skip = []
    for name, p in named.items():
        if name == "matcher.p2v.table":
            frozen = np.zeros(p.shape, bool)
            frozen[[model.vocab.blank_id, model.vocab.pad_id]] = True
            skip.append(frozen)
        else:
            skip.append(None)
    return tn.grad_check(f, list(named.values()), rng=rng, max_entries=max_entries, skip=skip)


# one instance of every layer kind ---------------------------------------------------

D, HEADS = 8, 4


def random_params(kind, rng):
    p = tn.parameter
    if kind == "linear":
        return {"weight": p(rng.normal(size=(D, D)) / 3), "bias": p(rng.normal(size=D))}
    if kind == "layer-norm":
        return {"gamma": p(1 + 0.1 * rng.normal(size=D)), "beta": p(rng.normal(size=D))}
    if kind == "depthwise-conv1d":
        return {"weight": p(rng.normal(size=(7, D)) / 3), "bias": p(rng.normal(size=D))}
    if kind == "feed-forward":
        return {"w1": p(rng.normal(size=(D, 2 * D)) / 3), "b1": p(rng.normal(size=2 * D)),
                "w2": p(rng.normal(size=(2 * D, D)) / 3), "b2": p(rng.normal(size=D))}
    if kind == "multi-head-attention":
        out = {}
        for n in "qkvo":
            out[f"w{n}"] = p(rng.normal(size=(D, D)) / 3)
            out[f"b{n}"] = p(0.1 * rng.normal(size=D))
        return out
    if kind == "embedding-lookup":
        table = rng.normal(size=(6, D))
        table[5] = 0.0
        return {"table": p(table)}
    return {}


def layer_case(kind, rng):
    """(params, forward closure, tensors to check)."""
    params = random_params(kind, rng)
    if kind == "embedding-lookup":
        # the frozen pad row has zero gradient by design, so check without it
        ids = rng.integers(0, 6, size=(2, 5))
        return params, lambda: L.layer_forward(kind, params, ids), list(params.values())
    width = 2 * D if kind == "glu" else D
    x = tn.parameter(rng.normal(size=(2, 5, width)))
    opts = {}
    if kind == "multi-head-attention":
        opts = {"heads": HEADS, "key_mask": np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], bool)}
    if kind == "residual-add":
        opts = {"branch": tn.parameter(rng.normal(size=(2, 5, D)))}
        return params, lambda: L.layer_forward(kind, params, x, **opts), [x, opts["branch"]]
    return params, lambda: L.layer_forward(kind, params, x, **opts), [x, *params.values()]
