import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import accuracy_score, confusion_matrix as sk_confusion, precision_recall_fscore_support

from udfs.errors import DataError, IdMismatch
from udfs.evaluation import (
    confusion_matrix,
    score_closed,
    score_open_world,
    stratified_split,
    write_report,
)
from udfs.ingest import Flow, Trace
from udfs.thresholds import UNKNOWN, Prediction


def _preds(decisions):
    return [Prediction(f"t{i:03d}", d, d if d != UNKNOWN else "a", 0.0, 1.0) for i, d in enumerate(decisions)]


def _truth(labels):
    return {f"t{i:03d}": y for i, y in enumerate(labels)}


def scalar_macro(cm, rows):
    """Brute-force macro P/R/F1 over the given row/column indices of a confusion matrix."""
    ps, rs, fs = [], [], []
    n = len(cm)
    for i in rows:
        tp = cm[i][i]
        col = sum(cm[j][i] for j in range(n))
        row = sum(cm[i][j] for j in range(n))
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(2 * p * r / (p + r) if p + r else 0.0)
    k = len(rows)
    return sum(ps) / k, sum(rs) / k, sum(fs) / k


def test_perfect_predictions():
    labels = ["a", "b", "c"] * 4
    rep = score_closed(_preds(labels), _truth(labels))
    assert rep.accuracy == rep.macro_f1 == rep.macro_precision == rep.macro_recall == 1.0


def test_all_predicted_first_class():
    labels = ["a"] * 5 + ["b"] * 5
    rep = score_closed(_preds(["a"] * 10), _truth(labels))
    assert rep.confusion.tolist() == [[5, 0], [5, 0]]
    assert rep.macro_precision == pytest.approx(0.25)
    assert rep.macro_recall == pytest.approx(0.5)
    assert rep.macro_f1 == pytest.approx(1 / 3)
    assert rep.per_class["b"]["precision"] == 0.0  # never predicted: 0/0 -> 0
    assert rep.accuracy == 0.5


def test_closed_scoring_counts_unknown_as_error():
    labels = ["a", "a", "b", "b"]
    rep = score_closed(_preds(["a", UNKNOWN, "b", UNKNOWN]), _truth(labels))
    assert rep.accuracy == 0.5
    assert rep.labels == ["a", "b", UNKNOWN]
    assert rep.per_class["a"]["precision"] == 1.0 and rep.per_class["a"]["recall"] == 0.5
    assert rep.extra["rejected"] == 2
    with pytest.raises(DataError):
        score_closed(_preds(["a"]), _truth([UNKNOWN]))


def test_confusion_rows_sum_to_support():
    rng = np.random.default_rng(0)
    classes = ["a", "b", "c", "d"]
    y_true = [classes[i] for i in rng.integers(0, 4, 60)]
    y_pred = [classes[i] for i in rng.integers(0, 4, 60)]
    rep = score_closed(_preds(y_pred), _truth(y_true))
    for i, c in enumerate(rep.labels):
        assert rep.confusion[i].sum() == rep.per_class[c]["support"]


def test_closed_metrics_match_sklearn_and_scalar_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        k = int(rng.integers(2, 6))
        classes = [f"c{i}" for i in range(k)]
        n = int(rng.integers(5, 80))
        y_true = [classes[i] for i in rng.integers(0, k, n)]
        pool = classes + [UNKNOWN]
        y_pred = [pool[i] for i in rng.integers(0, k + 1, n)]
        rep = score_closed(_preds(y_pred), _truth(y_true))
        known = sorted(set(y_true) | (set(y_pred) - {UNKNOWN}))
        p, r, f, _ = precision_recall_fscore_support(y_true, y_pred, labels=known, average="macro", zero_division=0)
        assert (rep.macro_precision, rep.macro_recall, rep.macro_f1) == pytest.approx((p, r, f), abs=1e-12)
        assert rep.accuracy == pytest.approx(accuracy_score(y_true, y_pred), abs=1e-12)
        oracle = scalar_macro(rep.confusion.tolist(), range(len(known)))
        assert (rep.macro_precision, rep.macro_recall, rep.macro_f1) == pytest.approx(oracle, abs=1e-12)
        np.testing.assert_array_equal(rep.confusion, sk_confusion(y_true, y_pred, labels=rep.labels))


def test_open_world_metrics_match_oracles():
    rng = np.random.default_rng(2)
    for _ in range(30):
        pool = ["a", "b", "c", UNKNOWN]
        n = int(rng.integers(5, 80))
        y_true = [pool[i] for i in rng.integers(0, 4, n)]
        y_pred = [pool[i] for i in rng.integers(0, 4, n)]
        rep = score_open_world(_preds(y_pred), _truth(y_true))
        labels = rep.labels
        assert labels[-1] == UNKNOWN
        p, r, f, _ = precision_recall_fscore_support(y_true, y_pred, labels=labels, average="macro", zero_division=0)
        assert (rep.macro_precision, rep.macro_recall, rep.macro_f1) == pytest.approx((p, r, f), abs=1e-12)
        kp, kr, kf, _ = precision_recall_fscore_support(
            y_true, y_pred, labels=labels[:-1], average="macro", zero_division=0
        )
        assert rep.extra["macro_f1_known"] == pytest.approx(kf, abs=1e-12)
        assert rep.extra["macro_recall_known"] == pytest.approx(kr, abs=1e-12)
        up, ur, _, _ = precision_recall_fscore_support(
            y_true, y_pred, labels=[UNKNOWN], average=None, zero_division=0
        )
        assert rep.extra["unknown_precision"] == pytest.approx(up[0])
        assert rep.extra["unknown_recall"] == pytest.approx(ur[0])
        excl = score_open_world(_preds(y_pred), _truth(y_true), include_unknown=False)
        assert excl.macro_f1 == pytest.approx(kf, abs=1e-12)


def test_open_world_ideal_and_never_reject():
    truth = ["a", "b"] + [UNKNOWN] * 18
    ideal = score_open_world(_preds(truth), _truth(truth))
    assert ideal.accuracy == ideal.macro_f1 == ideal.extra["unknown_recall"] == 1.0
    never = score_open_world(_preds(["a"] * 20), _truth(truth))
    assert never.accuracy <= 0.1 and never.extra["unknown_recall"] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c", UNKNOWN]), st.sampled_from(["a", "b", "c", UNKNOWN])), min_size=1, max_size=40), st.randoms())
def test_metrics_are_order_free_and_in_range(pairs, rnd):
    y_true = [t for t, _ in pairs]
    preds = _preds([p for _, p in pairs])
    truth = _truth(y_true)
    ref = score_open_world(preds, truth)
    shuffled = preds[:]
    rnd.shuffle(shuffled)
    got = score_open_world(shuffled, truth)
    assert got.to_dict() == ref.to_dict()
    for v in (ref.accuracy, ref.macro_precision, ref.macro_recall, ref.macro_f1):
        assert 0.0 <= v <= 1.0


def test_id_mismatch():
    with pytest.raises(IdMismatch):
        score_closed(_preds(["a", "b"]), {"t000": "a"})
    with pytest.raises(IdMismatch):
        score_closed(_preds(["a"]) * 2, {"t000": "a"})
    with pytest.raises(IdMismatch):
        score_open_world(_preds(["a"]), {"zzz": "a"})


def test_confusion_matrix_scalar():
    cm = confusion_matrix(["a", "b", "b"], ["b", "b", "a"], ["a", "b"])
    assert cm.tolist() == [[0, 1], [1, 1]]


def test_report_files(tmp_path):
    rep = score_closed(_preds(["a", "b"]), _truth(["a", "a"]))
    write_report(rep, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["macro_f1"] == rep.macro_f1 and data["confusion"] == [[1, 1], [0, 0]]
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "scenario,ACC,P,R,F1" and rows[1].startswith("closed,0.5,")


def test_stratified_split_is_seeded_and_per_class():
    traces = [Trace(f"{c}{i}", (Flow("k", 0, 1, 1, 1, 1),), c, 0) for c in "ab" for i in range(10)]
    train_a, test_a = stratified_split(traces, 0.3, seed=4)
    train_b, test_b = stratified_split(traces, 0.3, seed=4)
    assert [t.trace_id for t in test_a] == [t.trace_id for t in test_b]
    assert sum(t.label == "a" for t in test_a) == 3 and sum(t.label == "b" for t in test_a) == 3
    assert {t.trace_id for t in train_a} | {t.trace_id for t in test_a} == {t.trace_id for t in traces}
    _, other = stratified_split(traces, 0.3, seed=5)
    assert {t.trace_id for t in other} != {t.trace_id for t in test_a}
