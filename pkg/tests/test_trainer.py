import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwsmatch import tensor as tn
from kwsmatch import trainer as tr
from kwsmatch.encoder import EncoderConfig
from kwsmatch.evaluation import score_corpus
from kwsmatch.frontend import GenConfig, generate_corpus
from kwsmatch.matcher import MatcherConfig
from kwsmatch.model import pair_batch

GEN = GenConfig(vocab_size=6, min_len=3, max_len=5, T=6, frames_min=2, frames_max=3, feature_dim=4)


def tiny_config(**kw):
    base = dict(batch_size=8, epochs=2, warmup=10, dtype="float64", val_fraction=0.5,
                encoder=EncoderConfig(input_dim=4, layers=1, dim=8, heads=2),
                matcher=MatcherConfig(hidden=8, filter=8, layers=1, heads=2, max_len=6))
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(GEN, {"positive": 40, "easy": 20, "hard": 20}, seed=1)


# total loss ------------------------------------------------------------------------------

def test_total_loss_examples():
    assert tr.total_loss(1.0, 1.0, 1.0, (2, 1, 5)) == 8.0
    assert tr.total_loss(0.7, 3.1, 9.9, (1, 0, 0)) == 0.7
    assert tr.total_loss(0.0, 0.0, 0.0) == 0.0


def test_total_loss_zero_weight_term_may_be_missing():
    assert tr.total_loss(0.4, None, None, (1, 0, 0)) == 0.4
    with pytest.raises(ValueError, match="L_ss"):
        tr.total_loss(0.4, None, 1.0, (1, 1, 1))


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_total_loss_rejects_non_finite(bad):
    with pytest.raises(tr.NonFiniteLoss, match="L_ctc"):
        tr.total_loss(1.0, 1.0, bad)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=6, max_size=6))
def test_total_loss_linear(x):
    a, b = x[:3], x[3:]
    s = [p + q for p, q in zip(a, b)]
    assert tr.total_loss(*a) + tr.total_loss(*b) == pytest.approx(tr.total_loss(*s), rel=1e-12, abs=1e-12)


def test_total_loss_tensor_gradient_is_alpha():
    parts = [tn.parameter(np.array(v)) for v in (0.3, 0.2, 1.5)]
    tr.total_loss(*parts).backward()
    assert [p.grad.item() for p in parts] == [2.0, 1.0, 5.0]


# schedule -----------------------------------------------------------------------------------

def test_lr_schedule_first_step():
    assert tr.lr_schedule(1, 4000, 64, 2.0) == pytest.approx(2.0 * 64 ** -0.5 * 4000 ** -1.5, rel=1e-15)


def test_lr_schedule_peak_branches_meet():
    w = 500
    assert w ** -0.5 == pytest.approx(w * w ** -1.5, rel=1e-15)
    assert tr.lr_schedule(w, w, 16) == pytest.approx(16 ** -0.5 * w ** -0.5, rel=1e-15)


def test_lr_schedule_shape():
    lrs = [tr.lr_schedule(s, 50, 16) for s in range(1, 400)]
    peak = int(np.argmax(lrs))
    assert peak == 49
    assert all(a < b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a > b for a, b in zip(lrs[peak:], lrs[peak + 1:]))


def test_lr_schedule_rejects_step_zero():
    with pytest.raises(ValueError):
        tr.lr_schedule(0, 10, 16)


# adam ---------------------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    z = {"w": np.zeros(2)}
    new, _, _ = tr.adam_step(p, {"w": np.zeros(2)}, z, z, 1, 0.1)
    assert np.array_equal(new["w"], p["w"])
    new, _, _ = tr.adam_step(p, {}, z, z, 1, 0.1)
    assert np.array_equal(new["w"], p["w"])


def test_adam_single_step_by_hand():
    g = np.array([0.5, -3.0, 1e-9])
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    new, m, v = tr.adam_step({"w": np.zeros(3)}, {"w": g}, {"w": np.zeros(3)}, {"w": np.zeros(3)}, 1, lr)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    assert np.allclose(new["w"], -lr * m_hat / (np.sqrt(v_hat) + eps), rtol=1e-12, atol=0)
    # the first step moves every coordinate by ~lr regardless of gradient size
    assert np.allclose(np.abs(new["w"][:2]), lr, rtol=1e-6)
    assert np.allclose(m["w"], 0.1 * g) and np.allclose(v["w"], 0.001 * g * g)


def test_adam_constant_gradient_steady_state():
    g = np.array([2.0, -0.01])
    p = {"w": np.zeros(2)}
    m = {"w": np.zeros(2)}
    v = {"w": np.zeros(2)}
    lr = 1e-3
    for step in range(1, 3001):
        prev = p["w"].copy()
        p, m, v = tr.adam_step(p, {"w": g}, m, v, step, lr)
    delta = p["w"] - prev
    assert np.allclose(delta, -lr * np.sign(g), rtol=1e-5)


def test_adam_keeps_float32():
    p = {"w": np.ones(3, np.float32)}
    z = {"w": np.zeros(3, np.float32)}
    new, m, v = tr.adam_step(p, {"w": np.ones(3, np.float32)}, z, z, 1, 0.1)
    assert new["w"].dtype == m["w"].dtype == v["w"].dtype == np.float32


# checkpoints ------------------------------------------------------------------------------

def assert_same_state(a, b):
    assert a.step == b.step
    for ga, gb in ((a.params, b.params), (a.m, b.m), (a.v, b.v)):
        assert ga.keys() == gb.keys()
        for k in ga:
            assert ga[k].dtype == gb[k].dtype and np.array_equal(ga[k], gb[k]), k


@pytest.fixture(scope="module")
def trained(corpus):
    return tr.train(corpus, tiny_config())


def test_checkpoint_roundtrip_bitwise(trained, corpus, tmp_path):
    ckpt, _ = trained
    path = tmp_path / "a.ckpt"
    tr.save_checkpoint(ckpt, path)
    back = tr.load_checkpoint(path)
    assert_same_state(ckpt, back)
    assert back.config == ckpt.config
    a = score_corpus(ckpt.build_model(), corpus).scores
    b = score_corpus(back.build_model(), corpus).scores
    assert np.array_equal(a, b)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(Exception, match="magic|format|checkpoint"):
        tr.load_checkpoint(path)


def test_training_is_deterministic(trained, corpus):
    again, hist = tr.train(corpus, tiny_config())
    assert_same_state(trained[0], again)
    assert hist == trained[1]


def test_resume_reproduces_uninterrupted_run(trained, corpus, tmp_path):
    # stop mid-epoch, round-trip through disk, continue
    half, _ = tr.train(corpus, tiny_config(max_steps=6))
    tr.save_checkpoint(half, tmp_path / "half.ckpt")
    resumed, hist = tr.train(corpus, tiny_config(), resume=tr.load_checkpoint(tmp_path / "half.ckpt"))
    assert_same_state(trained[0], resumed)
    assert hist[-1] == trained[1][-1]


def test_seed_changes_the_run(trained, corpus):
    other, _ = tr.train(corpus, tiny_config(seed=5))
    key = "matcher.utt_head.weight"
    assert not np.array_equal(other.params[key], trained[0].params[key])


def test_history_fields(trained):
    _, hist = trained
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    for key in ("L_utt", "L_ss", "L_ctc", "total", "val_easy_auc", "val_hard_eer", "train_acc"):
        assert key in hist[-1]
    assert hist[-1]["total"] == pytest.approx(2 * hist[-1]["L_utt"] + hist[-1]["L_ss"] + 5 * hist[-1]["L_ctc"])


def test_ablation_runs_differ(trained, corpus):
    no_ss, hist = tr.train(corpus, tiny_config(alpha=(2.0, 0.0, 5.0)))
    assert math.isnan(hist[-1]["L_ss"])
    assert any(not np.array_equal(no_ss.params[k], trained[0].params[k]) for k in no_ss.params)
    # prefix heads never receive gradient when their weight is zero
    init = tr.init_checkpoint(no_ss.model_config(), tiny_config())
    heads = [k for k in no_ss.params if k.startswith("matcher.ss_heads.")]
    assert heads and all(np.array_equal(no_ss.params[k], init.params[k]) for k in heads)


def test_zero_epochs_returns_initialisation_at_chance():
    big = generate_corpus(GEN, {"positive": 200, "easy": 100, "hard": 100}, seed=2)
    ckpt, hist = tr.train(big, tiny_config(epochs=0, val_fraction=0.5))
    assert ckpt.step == 0
    init = tr.init_checkpoint(ckpt.model_config(), tiny_config())
    assert all(np.array_equal(ckpt.params[k], init.params[k]) for k in init.params)
    assert abs(hist[0]["val_all_auc"] - 0.5) < 0.15


def test_nan_parameter_aborts_with_last_good_checkpoint(corpus, trained):
    start = tr.init_checkpoint(trained[0].model_config(), tiny_config())
    start.params["matcher.utt_head.bias"][:] = np.nan
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.train(corpus, tiny_config(), resume=start)
    assert info.value.checkpoint.step == 0
    assert "step 1" in str(info.value)


def test_train_rejects_bad_inputs(corpus):
    with pytest.raises(ValueError, match="alpha"):
        tr.train(corpus, tiny_config(alpha=(1.0, -1.0, 0.0)))
    with pytest.raises(ValueError, match="T"):
        tr.train(corpus, tiny_config(matcher=MatcherConfig(hidden=8, filter=8, layers=1, heads=2, max_len=4)))


# stripping ------------------------------------------------------------------------------------

def test_strip_for_inference(trained, corpus):
    full = trained[0]
    lean = tr.strip_for_inference(full)
    assert lean.stripped and tr.strip_for_inference(lean) is lean
    assert lean.num_parameters() < full.num_parameters()
    assert not any(k.startswith(("ctc_head.", "matcher.ss_heads.")) for k in lean.params)
    for k, arr in lean.params.items():
        assert np.array_equal(arr, full.params[k])
    a = full.build_model()
    b = lean.build_model()
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = corpus.sample(int(rng.integers(len(corpus))))
        frames = rng.normal(size=(int(rng.integers(1, 30)), 4))
        batch = pair_batch(frames, s.anchor)
        assert np.array_equal(a.score(batch), b.score(batch))


def test_parameter_report_sums(trained):
    rep = tr.parameter_report(trained[0])
    parts = sum(v for k, v in rep.items() if k not in ("total", "stripped_total"))
    assert parts == rep["total"] == trained[0].num_parameters()
    training_only = sum(v for k, v in rep.items() if "training only" in k)
    assert rep["stripped_total"] == rep["total"] - training_only


def test_stripped_checkpoint_cannot_resume(trained, corpus):
    with pytest.raises(ValueError, match="stripped"):
        tr.train(corpus, tiny_config(), resume=tr.strip_for_inference(trained[0]))


def test_epoch_batches_cover_each_index_once():
    lengths = np.random.default_rng(0).integers(2, 40, size=203)
    batches = tr.epoch_batches(lengths, 16, seed=3, epoch=1)
    assert sorted(np.concatenate(batches).tolist()) == list(range(203))
    again = tr.epoch_batches(lengths, 16, seed=3, epoch=1)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    assert any(not np.array_equal(a, b) for a, b in zip(batches, tr.epoch_batches(lengths, 16, 3, 2)))
