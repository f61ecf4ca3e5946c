import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refground.errors import ClassWithoutPositives, EmptyEvaluationSet, SingleClassInput
from refground.metrics import (
    auc_score,
    average_precision,
    equal_error_rate,
    format_report,
    grounding_metrics,
    multilabel_metrics,
    rank_metrics,
    report_json,
    token_metrics,
)
from refground.objectives import BoundingBox


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    credit = 0.0
    for p in pos:
        for n in neg:
            credit += 1.0 if p > n else 0.5 if p == n else 0.0
    return credit / (len(pos) * len(neg))


def test_perfect_separation():
    auc, eer = rank_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert auc == 1.0 and eer == 0.0


def test_random_labels_give_half():
    rng = np.random.default_rng(0)
    auc, _ = rank_metrics(rng.random(2000), rng.random(2000) < 0.5)
    assert abs(auc - 0.5) < 0.05


def test_auc_equals_pair_count_on_twenty():
    rng = np.random.default_rng(1)
    scores = np.round(rng.random(20), 1)
    labels = rng.random(20) < 0.5
    assert auc_score(scores, labels) == pair_count_auc(scores, labels)


def test_eer_by_hand():
    # one negative above one positive: the ROC passes through (0.5, 0.5)
    scores = [0.9, 0.8, 0.3, 0.1]
    labels = [1, 0, 1, 0]
    assert equal_error_rate(scores, labels) == pytest.approx(0.5, abs=1e-12)


def test_single_class_raises():
    with pytest.raises(SingleClassInput):
        rank_metrics([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 60))
def test_auc_invariant_under_monotone_maps_and_flips(seed, n):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=n)
    labels = np.arange(n) % 2 == 0
    rng.shuffle(labels)
    auc, eer = rank_metrics(scores, labels)
    assert rank_metrics(np.exp(scores) * 3 + 1, labels)[0] == auc
    assert rank_metrics(scores, ~labels)[0] == pytest.approx(1 - auc, abs=1e-15)
    assert 0 <= eer <= 1


def test_grounding_exact_and_disjoint():
    boxes = [(0.5, 0.5, 0.2, 0.2), (0.3, 0.4, 0.1, 0.3)]
    assert grounding_metrics(boxes, boxes) == (1.0, 1.0, 1.0)
    far = [(0.1, 0.1, 0.1, 0.1), (0.9, 0.9, 0.1, 0.1)]
    assert grounding_metrics(far, boxes) == (0.0, 0.0, 0.0)
    with pytest.raises(EmptyEvaluationSet):
        grounding_metrics([], [])


def test_grounding_matches_raster_iou():
    rng = np.random.default_rng(2)
    res = 1000
    c = (np.arange(res) + 0.5) / res

    def raster(b):
        x1, y1, x2, y2 = BoundingBox(*b).corners()
        return ((c >= y1) & (c < y2))[:, None] & ((c >= x1) & (c < x2))[None, :]

    preds, trues, oracle = [], [], []
    for _ in range(12):
        t = (rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5))
        p = tuple(np.array(t) + rng.normal(0, 0.05, 4))
        preds.append(p)
        trues.append(t)
        a, b = raster(p), raster(t)
        oracle.append((a & b).sum() / (a | b).sum())
    oracle = np.array(oracle)
    mean, at50, at75 = grounding_metrics(preds, trues)
    assert abs(mean - oracle.mean()) < 2e-3
    assert at50 == (oracle >= 0.5).mean() and at75 == (oracle >= 0.75).mean()


def test_token_metrics_cases():
    truth = np.array([[1, 0, 1, 0]], bool)
    assert token_metrics(truth, truth)[:3] == (1.0, 1.0, 1.0)
    none = token_metrics(np.zeros_like(truth), truth)
    assert none[:3] == (0.0, 0.0, 0.0)
    assert "precision" in none.undefined


def confusion_oracle(pred, true, valid):
    tp = fp = fn = 0
    for p, t, v in zip(pred.ravel(), true.ravel(), valid.ravel()):
        if not v:
            continue
        tp += p and t
        fp += p and not t
        fn += t and not p
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_token_metrics_match_confusion_oracle(seed, B):
    rng = np.random.default_rng(seed)
    pred, true, valid = (rng.random((B, 6)) < q for q in (0.3, 0.3, 0.8))
    assert token_metrics(pred, true, valid)[:3] == confusion_oracle(pred, true, valid)


def ranked_precision_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, precisions = 0, []
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def multilabel_oracle(scores, labels):
    B, C = labels.shape
    aps = [ranked_precision_oracle(list(scores[:, c]), list(labels[:, c])) for c in range(C) if labels[:, c].any()]
    pred = scores >= 0.5
    f1s = [confusion_oracle(pred[:, c], labels[:, c], np.ones(B, bool))[2] for c in range(C)]
    of1 = confusion_oracle(pred, labels, np.ones_like(labels))[2]
    return sum(aps) / len(aps), sum(f1s) / C, of1


def test_multilabel_perfect_and_single_class():
    labels = np.array([[1, 0], [0, 1], [1, 1]], bool)
    assert multilabel_metrics(labels.astype(float), labels) == (1.0, 1.0, 1.0)
    assert average_precision([1.0, 0.0, 1.0], [1, 0, 1]) == 1.0


def test_multilabel_six_by_two_case():
    rng = np.random.default_rng(4)
    scores = np.round(rng.random((6, 2)), 2)
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0], [1, 0], [0, 1]], bool)
    assert multilabel_metrics(scores, labels) == multilabel_oracle(scores, labels)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 4))
def test_multilabel_matches_ranking_oracle(seed, B, C):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random((B, C)), 1)
    labels = rng.random((B, C)) < 0.5
    labels[0] = True
    assert multilabel_metrics(scores, labels) == multilabel_oracle(scores, labels)


def test_class_without_positives_warns_and_is_skipped():
    scores = np.array([[0.9, 0.2], [0.1, 0.3]])
    labels = np.array([[1, 0], [0, 0]], bool)
    with pytest.warns(ClassWithoutPositives):
        m, _, _ = multilabel_metrics(scores, labels)
    assert m == 1.0


def test_report_formats():
    metrics = {"ACC": 0.5, "n_samples": 3}
    assert format_report(metrics) == "ACC\t0.500000\nn_samples\t3\n"
    assert json.loads(report_json(metrics)) == metrics
