import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdcall.evaluation import (
    REPORT_COLUMNS,
    ConfusionCounts,
    UndefinedAucError,
    auc_roc,
    confusion_counts,
    evaluate,
    f_beta,
    format_metrics_table,
    metrics_to_csv,
    per_class_metrics,
)
from birdcall.network import ArchConfig, init_params
from birdcall.windowing import SegmentTensor


def brute_force_counts(true, pred, c):
    """O(N*C) double loop, one-vs-rest."""
    n = len(true)
    tp = [0] * c
    tn = [0] * c
    fp = [0] * c
    fn = [0] * c
    for cls in range(c):
        for t, p in zip(true, pred):
            if t == cls and p == cls:
                tp[cls] += 1
            elif t != cls and p != cls:
                tn[cls] += 1
            elif t != cls and p == cls:
                fp[cls] += 1
            else:
                fn[cls] += 1
    return tp, tn, fp, fn, n


def pairwise_auc(scores, truth):
    """Mann-Whitney: fraction of (pos, neg) pairs ranked correctly."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestConfusionCounts:
    def test_perfect_predictions(self):
        counts = confusion_counts([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert (counts.fp == 0).all() and (counts.fn == 0).all()
        np.testing.assert_array_equal(counts.tp, [1, 2, 1])

    def test_single_wrong_sample(self):
        counts = confusion_counts([0], [1], 3)
        assert counts.fn[0] == 1 and counts.tp[0] == 0
        assert counts.fp[1] == 1
        assert counts.tn[2] == 1

    def test_matches_brute_force_on_random_labels(self):
        rng = np.random.default_rng(0)
        true = rng.integers(0, 4, 50)
        pred = rng.integers(0, 4, 50)
        counts = confusion_counts(true, pred, 4)
        tp, tn, fp, fn, n = brute_force_counts(true.tolist(), pred.tolist(), 4)
        np.testing.assert_array_equal(counts.tp, tp)
        np.testing.assert_array_equal(counts.tn, tn)
        np.testing.assert_array_equal(counts.fp, fp)
        np.testing.assert_array_equal(counts.fn, fn)
        assert counts.n == n

    def test_counts_partition_every_sample(self):
        rng = np.random.default_rng(1)
        true = rng.integers(0, 5, 73)
        pred = rng.integers(0, 5, 73)
        counts = confusion_counts(true, pred, 5)
        totals = counts.tp + counts.tn + counts.fp + counts.fn
        np.testing.assert_array_equal(totals, np.full(5, 73))
        assert counts.tp.sum() == int((true == pred).sum())

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion_counts([0, 1], [0], 2)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            confusion_counts([0, 3], [0, 1], 3)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        true = rng.integers(0, 3, 30)
        pred = rng.integers(0, 3, 30)
        order = rng.permutation(30)
        a = confusion_counts(true, pred, 3)
        b = confusion_counts(true[order], pred[order], 3)
        np.testing.assert_array_equal(a.tp, b.tp)
        np.testing.assert_array_equal(a.tn, b.tn)


class TestPerClassMetrics:
    def test_hand_computed_row(self):
        counts = ConfusionCounts(
            tp=np.array([3]), tn=np.array([5]), fp=np.array([1]), fn=np.array([1]), n=10
        )
        row = per_class_metrics(counts)[0]
        assert row.precision == pytest.approx(0.75)
        assert row.fnr == pytest.approx(0.25)
        assert row.specificity == pytest.approx(5 / 6)
        assert row.f1 == pytest.approx(0.75)
        assert row.accuracy == pytest.approx(0.8)

    def test_degenerate_single_class(self):
        counts = ConfusionCounts(
            tp=np.array([10]), tn=np.array([0]), fp=np.array([0]), fn=np.array([0]), n=10
        )
        row = per_class_metrics(counts)[0]
        assert row.accuracy == 1.0
        assert row.fnr == 0.0

    def test_beta_one_reduces_to_harmonic_mean(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p, r = rng.uniform(0.01, 1.0, 2)
            assert f_beta(p, r, 1.0) == pytest.approx(2 * p * r / (p + r), rel=1e-12)

    def test_zero_denominators_report_zero(self):
        counts = ConfusionCounts(
            tp=np.array([0]), tn=np.array([9]), fp=np.array([0]), fn=np.array([1]), n=10
        )
        row = per_class_metrics(counts)[0]
        assert row.precision == 0.0
        assert row.f1 == 0.0

    def test_recall_plus_fnr_is_one(self):
        rng = np.random.default_rng(4)
        true = rng.integers(0, 3, 40)
        pred = rng.integers(0, 3, 40)
        for row in per_class_metrics(confusion_counts(true, pred, 3)):
            if row.recall > 0 or row.fnr > 0:
                assert row.recall + row.fnr == pytest.approx(1.0)


class TestAuc:
    def test_perfect_separation(self):
        assert auc_roc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0

    def test_constant_scores_give_half(self):
        assert auc_roc([0.5] * 6, [True, False, True, False, True, False]) == 0.5

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(5)
        scores = np.round(rng.uniform(0, 1, 20), 1)  # coarse grid forces ties
        truth = rng.integers(0, 2, 20).astype(bool)
        if truth.all() or not truth.any():
            truth[0] = ~truth[0]
        expected = pairwise_auc(scores.tolist(), truth.tolist())
        assert auc_roc(scores, truth) == pytest.approx(expected, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.uniform(0, 1, 15)
        truth = rng.integers(0, 2, 15).astype(bool)
        if truth.all() or not truth.any():
            truth[0] = ~truth[0]
        base = auc_roc(scores, truth)
        assert auc_roc(np.exp(3 * scores), truth) == pytest.approx(base, abs=1e-12)

    def test_single_class_truth_rejected(self):
        with pytest.raises(UndefinedAucError):
            auc_roc([0.1, 0.2], [True, True])


def biased_model(class_count=2, feature_count=2):
    """All-zero network nudged to always pick class 0."""
    arch = ArchConfig(
        class_count=class_count,
        feature_count=feature_count,
        conv_kernels=3,
        projection_dim=8,
        image_shape=(5, 6),
    )
    params = init_params(arch, 0)
    for tensor in params.tensors.values():
        tensor[...] = 0.0
    params.tensors["dense2_b"][0] = 5.0
    return params


def tensor_for(label, seed, feature_count=2, segments=1):
    rng = np.random.default_rng(seed)
    return SegmentTensor(
        record_id=f"r{seed}",
        label=label,
        images=rng.standard_normal((segments, feature_count, 5, 6)),
        feature_names=("a", "b"),
    )


class TestEvaluate:
    def test_always_class_zero_on_balanced_set(self):
        params = biased_model()
        records = [tensor_for(i % 2, i) for i in range(10)]
        report = evaluate(params, records, ["zero", "one"])
        assert report.per_class[0].accuracy == pytest.approx(0.5)
        assert report.per_class[0].specificity == 0.0  # every negative flagged
        assert report.per_class[1].recall == 0.0
        assert report.micro.accuracy == pytest.approx(0.5)

    def test_macro_is_mean_of_per_class(self):
        params = biased_model()
        records = [tensor_for(i % 2, i) for i in range(8)]
        report = evaluate(params, records)
        expected = np.mean([r.accuracy for r in report.per_class])
        assert report.macro.accuracy == pytest.approx(expected)

    def test_micro_accuracy_is_fraction_correct(self):
        params = biased_model()
        records = [tensor_for(0, i) for i in range(3)] + [tensor_for(1, 99)]
        report = evaluate(params, records)
        assert report.micro.accuracy == pytest.approx(3 / 4)
        assert report.micro.precision == report.micro.accuracy
        assert report.micro.recall == report.micro.accuracy
        assert report.micro.f1 == pytest.approx(report.micro.accuracy)

    def test_report_columns_match_the_table_layout(self):
        assert REPORT_COLUMNS == ("Accuracy", "Specificity", "F1", "FNR", "AUC", "Precision")
        params = biased_model()
        report = evaluate(params, [tensor_for(i % 2, i) for i in range(4)])
        csv = metrics_to_csv(report)
        header = csv.splitlines()[0]
        assert header == "class,accuracy,specificity,f1,fnr,auc,precision,recall,f2"
        table = format_metrics_table(report)
        first = table.splitlines()[0]
        for column in REPORT_COLUMNS:
            assert column in first
        assert "macro-average" in table and "micro-average" in table

    def test_empty_record_list_rejected(self):
        with pytest.raises(ValueError):
            evaluate(biased_model(), [])

    def test_f1_is_harmonic_mean_everywhere(self):
        params = biased_model()
        report = evaluate(params, [tensor_for(i % 2, i) for i in range(10)])
        for row in report.per_class:
            if row.precision + row.recall > 0:
                expected = 2 * row.precision * row.recall / (row.precision + row.recall)
                assert row.f1 == pytest.approx(expected)
