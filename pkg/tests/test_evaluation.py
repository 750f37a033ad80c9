import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwsmatch import evaluation as ev
from kwsmatch.frontend import PAIR_KINDS

from oracles import brute_auc, brute_eer


def random_set(rng, ties=False):
    n = int(rng.integers(2, 101))
    truth = rng.integers(0, 2, size=n).astype(bool)
    truth[0], truth[1] = True, False
    scores = rng.integers(0, 5, size=n) / 4 if ties else rng.random(n)
    return scores, truth


def test_auc_examples():
    assert ev.auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert ev.auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    for k in range(100):
        s, t = random_set(rng, ties=k % 2 == 0)
        assert ev.auc(s, t) == brute_auc(s, t)


def test_eer_examples():
    assert ev.eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 0.0
    rng = np.random.default_rng(1)
    assert abs(ev.eer(rng.random(20000), rng.integers(0, 2, 20000)) - 0.5) < 0.02


def test_eer_matches_threshold_sweep():
    rng = np.random.default_rng(2)
    for k in range(100):
        s, t = random_set(rng, ties=k % 2 == 0)
        assert ev.eer(s, t) == pytest.approx(brute_eer(s, t), abs=1e-15)


def test_eer_twenty_points_by_hand():
    # scores 0..19, positives are the 10 largest except 12 is swapped with 7
    scores = np.arange(20.0)
    truth = scores >= 10
    truth[12], truth[7] = False, True
    # at thr=8..10 FAR and FRR bracket each other; the sweep oracle decides
    assert ev.eer(scores, truth) == pytest.approx(brute_eer(scores, truth))
    assert ev.eer(scores, truth) == pytest.approx(0.1)


def test_metrics_reject_single_class():
    with pytest.raises(ValueError):
        ev.auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        ev.eer([0.1, 0.2], [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=60))
def test_metric_invariances(pairs):
    # a 1e-6 grid keeps exp() strictly increasing in floating point
    scores = np.round(np.array([p[0] for p in pairs]), 6)
    truth = np.array([p[1] for p in pairs])
    if truth.all() or not truth.any():
        return
    a, e = ev.auc(scores, truth), ev.eer(scores, truth)
    # strictly increasing transform
    assert ev.auc(np.exp(3 * scores) - 7, truth) == a
    assert ev.eer(np.exp(3 * scores) - 7, truth) == pytest.approx(e, abs=1e-12)
    # permutation
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert ev.auc(scores[perm], truth[perm]) == a
    assert ev.eer(scores[perm], truth[perm]) == pytest.approx(e, abs=1e-12)
    # label flip
    assert a + ev.auc(scores, ~truth) == pytest.approx(1.0, abs=1e-12)


def test_roc_points_span_corners():
    pts = ev.roc_points([0.9, 0.3, 0.4, 0.1], [1, 1, 0, 0])
    assert list(pts[0, 1:]) == [1.0, 1.0]
    assert list(pts[-1, 1:]) == [0.0, 0.0]


def test_scored_set_subsets():
    kinds = np.array([0, 0, 1, 2, 2])
    s = ev.ScoredSet(np.array([0.9, 0.8, 0.1, 0.85, 0.2]), np.array([1, 1, 0, 0, 0]), kinds)
    assert s.subset("easy").metrics()["auc"] == 1.0
    assert s.subset("hard").metrics()["auc"] == pytest.approx(brute_auc([0.9, 0.8, 0.85, 0.2], [1, 1, 0, 0]))
    m = ev.subset_metrics(s)
    assert set(m) == {f"{a}_{b}" for a in ("all", "easy", "hard") for b in ("auc", "eer")}


def entry(name, scored, fp="abc", seed=0):
    return {"name": name, "scored": scored, "fingerprint": fp, "seed": seed}


def test_ablation_table_rows_and_recomputation():
    rng = np.random.default_rng(3)
    kinds = np.repeat([0, 1, 2], 30)
    truth = (kinds == 0).astype(int)
    sets = [ev.ScoredSet(rng.random(90) + 0.3 * truth, truth, kinds) for _ in range(3)]
    names = [ev.method_name(a) for a in [(2, 1, 5), (2, 0, 5), (1, 0, 0)]]
    assert names == ["full", "w/o L_ss", "w/o L_ss, w/o L_CTC"]
    rows = ev.ablation_table([entry(n, s) for n, s in zip(names, sets)])
    assert [r["method"] for r in rows] == names
    for r, s in zip(rows, sets):
        hard = s.subset("hard")
        assert r["hard_auc"] == brute_auc(hard.scores, hard.truth)
        assert r["hard_eer"] == pytest.approx(brute_eer(hard.scores, hard.truth), abs=1e-15)
    text = ev.format_table(rows)
    assert "AUC hard" in text and text.count("\n") == 4


def test_ablation_identical_checkpoint_identical_rows():
    kinds = np.repeat([0, 1, 2], 5)
    s = ev.ScoredSet(np.linspace(0, 1, 15), (kinds == 0).astype(int), kinds)
    a, b = ev.ablation_table([entry("full", s), entry("full", s)])
    assert a == b


def test_ablation_rejects_mixed_corpora():
    kinds = np.repeat([0, 1, 2], 5)
    s = ev.ScoredSet(np.linspace(0, 1, 15), (kinds == 0).astype(int), kinds)
    with pytest.raises(ValueError, match="disagree"):
        ev.ablation_table([entry("full", s, fp="a"), entry("w/o L_ss", s, fp="b")])


def test_csv_header_and_float_format():
    text = ev.rows_to_csv([(1, "S", "S", "match", 0.25)])
    assert text.splitlines() == [",".join(ev.DUMP_HEADER), "1,S,S,match,0.250000"]


def test_pair_kind_indices_stable():
    assert PAIR_KINDS == ("positive", "easy", "hard")
