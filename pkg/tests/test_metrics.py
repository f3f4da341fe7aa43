from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avfusion.data import SynthConfig, synth_dataset
from avfusion.metrics import (MetricReport, PredictionSet, UndefinedAPError, average_precision, evaluate,
                              f1_micro, gap_at_k, mean_class_ap, report)
from avfusion.models import build_model, toy_spec


# independent oracles -------------------------------------------------------


def oracle_ap(items, num_relevant):
    """items: list of (sort_key, relevant); literal sum of P(k) * delta r(k)."""
    ranked = [rel for _, rel in sorted(items, key=lambda t: t[0])]
    total, hits = 0.0, 0
    for k, rel in enumerate(ranked, 1):
        if rel:
            hits += 1
            total += (hits / k) * (1.0 / num_relevant)
    return total


def oracle_gap(ids, scores, labels, k):
    pooled = []
    for vid, row, labs in zip(ids, scores, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))[:k]
        for c in order:
            pooled.append(((-row[c], vid, c), c in labs))
    total = sum(len(l) for l in labels)
    return oracle_ap(pooled, total) if total else 0.0


def oracle_f1(scores, labels, thr):
    tp = fp = fn = 0
    for row, labs in zip(scores, labels):
        for c, s in enumerate(row):
            pred, true = s >= thr, c in labs
            tp += pred and true
            fp += pred and not true
            fn += true and not pred
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return (2 * p * r / (p + r) if p + r else 0.0), p, r


@st.composite
def prediction_sets(draw):
    n = draw(st.integers(1, 8))
    c = draw(st.integers(1, 6))
    # a coarse grid makes ties common so the tie order is exercised
    grid = st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.5, 0.75, 0.9, 1.0])
    scores = np.array([[draw(grid) for _ in range(c)] for _ in range(n)])
    labels = [tuple(sorted(draw(st.sets(st.integers(0, c - 1), max_size=c)))) for _ in range(n)]
    ids = draw(st.permutations([f"v{i:02d}" for i in range(n)]))
    return PredictionSet(list(ids), scores, labels)


# average precision ---------------------------------------------------------


def test_ap_hand_cases():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision([0.3], [1]) == 1.0
    with pytest.raises(UndefinedAPError):
        average_precision([0.3, 0.2], [0, 0])


@pytest.mark.parametrize("n", range(1, 9))
def test_worst_ranking_closed_form(n):
    for r in range(1, n + 1):
        rel = [0] * (n - r) + [1] * r
        scores = list(range(n, 0, -1))
        closed = float(sum(Fraction(i, n - r + i) for i in range(1, r + 1)) / r)
        assert average_precision(scores, rel) == pytest.approx(closed, abs=1e-12)
        assert oracle_ap([(i, x) for i, x in enumerate(rel)], r) == pytest.approx(closed, abs=1e-12)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-10, 10), st.booleans()), min_size=1, max_size=12))
def test_ap_matches_oracle_and_is_rank_only(items):
    scores = [s for s, _ in items]
    rel = [int(r) for _, r in items]
    if not any(rel):
        return
    ref = oracle_ap([((-s, i), r) for i, (s, r) in enumerate(zip(scores, rel))], sum(rel))
    assert average_precision(scores, rel) == pytest.approx(ref, abs=1e-12)
    mapped = [4.0 * s for s in scores]  # exact, so strictly increasing without new ties
    assert average_precision(mapped, rel) == pytest.approx(ref, abs=1e-12)


# gap / f1 oracle equivalence ---------------------------------------------


@settings(max_examples=200)
@given(prediction_sets(), st.integers(1, 7))
def test_gap_matches_oracle(p, k):
    ref = oracle_gap(p.ids, p.scores.tolist(), [set(l) for l in p.labels], k)
    assert abs(gap_at_k(p, k) - ref) <= 1e-12


@settings(max_examples=200)
@given(prediction_sets(), st.sampled_from([0.1, 0.5, 0.75, 0.99]))
def test_f1_matches_oracle_and_bounds(p, thr):
    f1, prec, rec = f1_micro(p, thr)
    ref = oracle_f1(p.scores.tolist(), [set(l) for l in p.labels], thr)
    assert np.allclose((f1, prec, rec), ref, rtol=0, atol=1e-12)
    assert f1 <= min(2 * prec, 2 * rec) + 1e-15
    assert f1 <= max(prec, rec) + 1e-15


def test_gap_two_video_hand_case():
    p = PredictionSet(["a", "b"], [[0.9, 0.2, 0.6], [0.3, 0.8, 0.7]], [(0,), (2,)])
    # pooled top-2: a0 .9 (hit), b1 .8, b2 .7 (hit), a2 .6 ; 2 positives
    assert gap_at_k(p, 2) == pytest.approx((1 / 1 + 2 / 3) / 2, abs=1e-15)


def test_gap_perfect_and_all_ties():
    p = PredictionSet(["a", "b"], [[0.9, 0.1, 0.8], [0.2, 0.7, 0.1]], [(0, 2), (1,)])
    assert gap_at_k(p, 3) == 1.0
    tied = PredictionSet(["b", "a"], np.full((2, 3), 0.5), [(2,), (0,)])
    # order a0 a1 a2 b0 b1 b2 -> hits at ranks 1 and 6
    assert gap_at_k(tied, 3) == pytest.approx((1 + 2 / 6) / 2, abs=1e-15)
    assert gap_at_k(tied, 3) == gap_at_k(tied, 3)


def test_gap_k_caps_recall():
    p = PredictionSet(["a"], [[0.9, 0.8, 0.7]], [(0, 1, 2)])
    assert gap_at_k(p, 1) == pytest.approx(1 / 3, abs=1e-15)
    assert gap_at_k(p, 20) == 1.0


def test_f1_hand_cases():
    p = PredictionSet(["a"], [[0.9, 0.6, 0.1]], [(0,)])
    f1, prec, rec = f1_micro(p, 0.5)
    assert (prec, rec) == (0.5, 1.0) and f1 == pytest.approx(2 / 3, abs=1e-15)
    exact = PredictionSet(["a", "b"], [[1.0, 0.0], [0.0, 1.0]], [(0,), (1,)])
    assert f1_micro(exact, 0.5) == (1.0, 1.0, 1.0)
    empty = PredictionSet(["a"], [[0.1, 0.2]], [()])
    assert f1_micro(empty, 0.5) == (0.0, 0.0, 0.0)


def test_mean_class_ap_skips_empty_classes():
    p = PredictionSet(["a", "b"], [[0.9, 0.1, 0.5], [0.2, 0.8, 0.4]], [(0,), (0,)])
    assert mean_class_ap(p) == 1.0


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet(["a", "a"], np.zeros((2, 2)), [(), ()])
    with pytest.raises(ValueError):
        PredictionSet(["a"], np.zeros((1, 2)), [(2,)])
    with pytest.raises(ValueError):
        PredictionSet(["a"], np.zeros((2, 2)), [()])


def test_report_is_self_describing():
    p = PredictionSet(["a"], [[0.9, 0.6, 0.1]], [(0,)])
    r = report(p, k=2, threshold=0.5)
    line = r.to_line()
    assert '"k": 2' in line and '"threshold": 0.5' in line and '"f1_scheme": "micro"' in line
    assert r.to_csv().splitlines()[0].split(",") == list(MetricReport.CSV_FIELDS)


# evaluate ------------------------------------------------------------------


def small_set(n=600, seed=0):
    return synth_dataset(SynthConfig(num_classes=3, num_records=n, visual_dim=6, audio_dim=4, audio_only=1,
                                     visual_only=1, cross_modal=1, seed=seed))


def test_evaluate_is_deterministic_and_checks_dims():
    ds = small_set()
    m = build_model(toy_spec("attend_fusion"), 0)
    assert evaluate(m, ds).to_line() == evaluate(m, ds).to_line()
    with pytest.raises(ValueError):
        evaluate(build_model(toy_spec("attend_fusion", num_classes=4), 0), ds)


def test_random_scores_give_gap_near_label_density():
    ds = synth_dataset(SynthConfig(num_records=2000, seed=3))
    y = ds.dense_labels()
    rng = np.random.default_rng(0)
    p = PredictionSet(ds.ids, rng.random(y.shape), ds.labels)
    # with k covering every class the pooled list is a random ranking of all pairs
    assert abs(gap_at_k(p, k=y.shape[1]) - y.mean()) < 0.05


def test_constant_zero_scores():
    ds = small_set(50)
    p = PredictionSet(ds.ids, np.zeros((50, 3)), ds.labels)
    f1, _, rec = f1_micro(p, 0.5)
    assert rec == 0.0 and f1 == 0.0


def test_ap_agrees_with_sklearn_on_tie_free_scores():
    skm = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        s, r = rng.random(n), rng.random(n) < 0.4
        if r.any():
            assert average_precision(s, r) == pytest.approx(skm.average_precision_score(r, s), abs=1e-12)
