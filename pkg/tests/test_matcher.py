import math

import numpy as np
import pytest

from kwsmatch import tensor as tn
from kwsmatch.frontend import INVALID, MATCH, MISMATCH, PhonemeVocab
from kwsmatch.matcher import (Matcher, MatcherConfig, match_score, subsequence_logits,
                              subsequence_loss, utterance_logits, utterance_loss)

VOCAB = PhonemeVocab.default(6)
CFG = MatcherConfig(hidden=8, filter=16, layers=2, heads=2, max_len=6)


def make_matcher(seed=0, cfg=CFG, **kw):
    return Matcher(np.random.default_rng(seed), cfg, VOCAB.table_rows, (VOCAB.blank_id, VOCAB.pad_id), **kw)


def anchor_ids(T=6, valid=3):
    ids = np.full((1, T), VOCAB.pad_id)
    ids[0, :valid] = [0, 3, 1][:valid]
    return ids


@pytest.mark.parametrize("n", [1, 2, 10, 100, 500])
def test_cross_attend_shape_independent_of_audio_length(n):
    m = make_matcher()
    audio = tn.as_tensor(np.random.default_rng(n).normal(size=(1, n, 8)))
    assert m.cross_attend(m.query(anchor_ids()), audio).shape == (1, 6, 8)


def test_cross_attend_rejects_empty_audio():
    m = make_matcher()
    with pytest.raises(ValueError, match="n = 0"):
        m.cross_attend(m.query(anchor_ids()), tn.as_tensor(np.zeros((1, 0, 8))))


def test_p2v_blank_and_pad_rows_zero():
    m = make_matcher()
    assert np.all(m.p2v.table.data[[VOCAB.blank_id, VOCAB.pad_id]] == 0)


def test_utterance_head_shapes_full_size():
    m = make_matcher(cfg=MatcherConfig(), with_subsequence_heads=False)
    assert m.utt_head.weight.shape == (25 * 64, 2)
    assert m.ss_heads == []
    with pytest.raises(RuntimeError):
        m.subsequence_heads(tn.as_tensor(np.zeros((1, 25, 64))))


def test_subsequence_head_widths():
    m = make_matcher()
    assert [h.weight.shape[0] for h in m.ss_heads] == [8 * (t + 1) for t in range(6)]


def test_utterance_head_zero_weights_score_half():
    m = make_matcher()
    m.utt_head.weight.data[:] = 0
    C = tn.as_tensor(np.random.default_rng(1).normal(size=(2, 6, 8)))
    logits = m.utterance_head(C)
    assert np.all(logits.data == 0)
    assert np.allclose(match_score(logits), 0.5)


def test_utterance_head_is_affine_in_flattened_rows():
    m = make_matcher()
    m.utt_head.bias.data[:] = [0.3, -0.2]
    C = np.random.default_rng(2).normal(size=(1, 6, 8))
    got = m.utterance_head(tn.as_tensor(C)).data[0]
    flat = C[0].reshape(-1)
    expect = [flat @ m.utt_head.weight.data[:, j] + m.utt_head.bias.data[j] for j in range(2)]
    assert np.allclose(got, expect, atol=1e-13)


def test_utterance_head_sees_only_C():
    # same C injected after audio of different lengths gives the same decision
    m = make_matcher()
    q = m.query(anchor_ids())
    C = m.cross_attend(q, tn.as_tensor(np.random.default_rng(3).normal(size=(1, 40, 8))))
    m.cross_attend(q, tn.as_tensor(np.random.default_rng(4).normal(size=(1, 7, 8))))
    assert np.array_equal(m.utterance_head(C).data, utterance_logits(tn.as_tensor(C.data), m.utt_head).data)


def test_subsequence_heads_zero_weights():
    m = make_matcher()
    for h in m.ss_heads:
        h.weight.data[:] = 0
    out = m.subsequence_heads(tn.as_tensor(np.random.default_rng(5).normal(size=(3, 6, 8))))
    assert out.shape == (3, 6, 2) and np.all(out.data == 0)


def test_prefix_locality_perturbation():
    m = make_matcher()
    C = np.random.default_rng(6).normal(size=(1, 6, 8))
    base = m.subsequence_heads(tn.as_tensor(C)).data
    for j in range(6):
        bumped = C.copy()
        bumped[0, j] += 1.0
        out = m.subsequence_heads(tn.as_tensor(bumped)).data
        changed = np.any(out != base, axis=-1)[0]
        assert list(changed) == [t >= j for t in range(6)]


def test_prefix_locality_gradient():
    m = make_matcher()
    for t in range(6):
        C = tn.parameter(np.random.default_rng(7).normal(size=(1, 6, 8)))
        out = subsequence_logits(C, m.ss_heads)
        seed = np.zeros(out.shape)
        seed[0, t] = [1.0, -2.0]
        out.backward(seed)
        assert np.all(C.grad[0, t + 1:] == 0)
        assert np.any(C.grad[0, : t + 1] != 0)


def test_subsequence_loss_uniform_logits_log2():
    labels = np.array([MATCH, MATCH, MISMATCH, MISMATCH, MISMATCH, INVALID])
    loss = subsequence_loss(tn.as_tensor(np.zeros((6, 2))), labels)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_subsequence_loss_perfect_prediction_zero():
    labels = np.array([MATCH, MISMATCH, INVALID])
    logits = np.array([[-800.0, 800.0], [800.0, -800.0], [0.0, 0.0]])
    assert subsequence_loss(tn.as_tensor(logits), labels).item() == pytest.approx(0.0, abs=1e-12)


def test_subsequence_loss_matches_direct_average():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(4, 6, 2))
    labels = np.full((4, 6), INVALID)
    for b in range(4):
        v = int(rng.integers(1, 7))
        labels[b, :v] = rng.integers(0, 2, size=v)
    per_sample = []
    for b in range(4):
        terms = []
        for t in range(6):
            if labels[b, t] == INVALID:
                continue
            z = logits[b, t]
            terms.append(-(z[labels[b, t]] - math.log(math.exp(z[0]) + math.exp(z[1]))))
        per_sample.append(sum(terms) / len(terms))
    expect = sum(per_sample) / 4
    assert subsequence_loss(tn.as_tensor(logits), labels).item() == pytest.approx(expect, abs=1e-12)


def test_subsequence_loss_masks_heads_past_valid_length():
    m = make_matcher()
    C = tn.as_tensor(np.random.default_rng(9).normal(size=(1, 6, 8)))
    labels = np.array([[MATCH, MATCH, MISMATCH, INVALID, INVALID, INVALID]])
    subsequence_loss(subsequence_logits(C, m.ss_heads), labels).backward()
    for t, head in enumerate(m.ss_heads):
        if t >= 3:
            assert np.all(head.weight.grad == 0) and np.all(head.bias.grad == 0)
        else:
            assert np.any(head.weight.grad != 0)


def test_subsequence_loss_rejects_all_invalid():
    with pytest.raises(ValueError):
        subsequence_loss(tn.as_tensor(np.zeros((2, 2))), np.array([INVALID, INVALID]))


def test_utterance_loss_batch_mean():
    logits = tn.as_tensor(np.array([[0.0, 0.0], [2.0, -1.0]]))
    expect = (math.log(2) + math.log(1 + math.exp(-3))) / 2
    assert utterance_loss(logits, [1, 0]).item() == pytest.approx(expect, abs=1e-14)


def test_matcher_grad_check_utterance_and_prefix_losses():
    cfg = MatcherConfig(hidden=4, filter=6, layers=1, heads=2, max_len=4)
    m = make_matcher(1, cfg)
    audio = tn.parameter(np.random.default_rng(10).normal(size=(1, 5, 4)))
    ids = np.array([[0, 2, VOCAB.pad_id, VOCAB.pad_id]])
    labels = np.array([[MATCH, MISMATCH, INVALID, INVALID]])

    def f():
        C = m.cross_attend(m.query(ids), audio)
        return tn.add(utterance_loss(m.utterance_head(C), [0]),
                      subsequence_loss(m.subsequence_heads(C), labels))

    named = dict(m.named_parameters())
    params = [audio] + list(named.values())
    frozen = np.zeros(named["p2v.table"].shape, bool)
    frozen[[VOCAB.blank_id, VOCAB.pad_id]] = True
    skip = [None] + [frozen if n == "p2v.table" else None for n in named]
    assert tn.grad_check(f, params, rng=np.random.default_rng(11), max_entries=5, skip=skip) <= 1e-4
