"""Metric oracles: hand-computed references and all-pairs AUC."""

import numpy as np
import pytest

from upet.metrics import (EvalReport, accuracy, auc_ovr, evaluate_predictions,
                          f1_macro, mae_volumes)

CN, MCI, AD = 0, 1, 2


class TestAccuracyF1:
    def test_perfect_predictions(self):
        labels = [CN, MCI, AD, CN]
        assert accuracy(labels, labels) == 1.0
        assert f1_macro(labels, labels) == 1.0

    def test_worked_example_seven_ninths(self):
        labels = [CN, CN, AD, MCI]
        preds = [CN, AD, AD, MCI]
        assert accuracy(preds, labels) == 0.75
        assert abs(f1_macro(preds, labels) - 7 / 9) < 1e-12

    def test_single_class_collapse_on_balanced_labels(self):
        labels = [CN, CN, CN, MCI, MCI, MCI, AD, AD, AD]
        preds = [CN] * 9
        assert abs(accuracy(preds, labels) - 1 / 3) < 1e-12
        assert abs(f1_macro(preds, labels) - 1 / 6) < 1e-12

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            accuracy([], [])
        with pytest.raises(ValueError, match="non-empty"):
            f1_macro([], [])

    @pytest.mark.parametrize("seed", range(10))
    def test_invariant_under_consistent_relabeling(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, size=20)
        preds = rng.integers(0, 3, size=20)
        perm = rng.permutation(3)
        assert accuracy(perm[preds], perm[labels]) == accuracy(preds, labels)
        assert abs(f1_macro(perm[preds], perm[labels]) - f1_macro(preds, labels)) < 1e-12


def all_pairs_auc(scores, positive):
    """Brute-force mean over positive-negative pairs of 1[s+ > s-] + 0.5*1[=]."""
    pos = scores[positive]
    neg = scores[~positive]
    if len(pos) == 0 or len(neg) == 0:
        return None
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        scores = np.array([[0.9, 0.05, 0.05], [0.8, 0.1, 0.1],
                           [0.2, 0.4, 0.4], [0.1, 0.5, 0.4]])
        labels = [CN, CN, MCI, AD]
        assert auc_ovr(scores, labels)[CN] == 1.0

    def test_all_ties_give_half(self):
        scores = np.full((6, 3), 1 / 3)
        labels = [CN, CN, MCI, MCI, AD, AD]
        assert auc_ovr(scores, labels) == (0.5, 0.5, 0.5)

    def test_absent_class_is_undefined(self):
        scores = np.random.default_rng(0).uniform(size=(4, 3))
        labels = [CN, CN, MCI, MCI]          # no AD
        aucs = auc_ovr(scores, labels)
        assert aucs[AD] is None
        assert aucs[CN] is not None

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_all_pairs_oracle(self, seed):
        rng = np.random.default_rng([13, seed])
        n = int(rng.integers(4, 13))
        labels = rng.integers(0, 3, size=n)
        # quantized scores produce real ties
        scores = np.round(rng.uniform(size=(n, 3)), 1)
        got = auc_ovr(scores, labels)
        for c in range(3):
            ref = all_pairs_auc(scores[:, c], labels == c)
            if ref is None:
                assert got[c] is None
            else:
                assert abs(got[c] - ref) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_invariant_under_monotone_score_transform(self, seed):
        rng = np.random.default_rng([29, seed])
        labels = np.array([CN, CN, MCI, AD, MCI, AD, CN, AD])
        scores = rng.uniform(size=(8, 3))
        warped = np.exp(3.0 * scores) + 1.0
        assert auc_ovr(scores, labels) == auc_ovr(warped, labels)


class TestMae:
    def test_identical_volumes(self):
        v = np.random.default_rng(0).standard_normal((4, 4, 4))
        assert mae_volumes(v, v) == 0.0

    def test_constant_offset(self):
        v = np.random.default_rng(1).standard_normal((4, 4, 4))
        assert abs(mae_volumes(v + 0.25, v) - 0.25) < 1e-7

    def test_matches_high_precision_loop(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 3, 3)).astype(np.float32)
        b = rng.standard_normal((3, 3, 3)).astype(np.float32)
        acc = 0.0
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    acc += abs(float(a[i, j, k]) - float(b[i, j, k]))
        assert abs(mae_volumes(a, b) - acc / 27) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            mae_volumes(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)))


class TestEvalReport:
    def test_confusion_counts_sum_to_samples(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 3, size=30)
        preds = rng.integers(0, 3, size=30)
        probs = rng.uniform(size=(30, 3))
        report = evaluate_predictions(preds, labels, probs, [0.1, 0.2])
        assert sum(sum(row) for row in report.confusion) == 30
        assert report.n_samples == 30
        assert report.n_paired == 2
        assert abs(report.mae - 0.15) < 1e-12

    def test_serialization_writes_both_formats(self, tmp_path):
        report = EvalReport(accuracy=0.5, f1_macro=0.4, auc_cn=0.9,
                            auc_ad=None, auc_mci=0.6, mae=None, n_samples=4)
        txt = tmp_path / "metrics.txt"
        csvp = tmp_path / "metrics.csv"
        report.write(txt, csvp)
        text = txt.read_text()
        assert "accuracy = 0.5" in text
        assert "auc_ad = undefined" in text
        rows = csvp.read_text().splitlines()
        assert rows[0] == "metric,value"
        assert "auc_ad," in "\n".join(rows)     # undefined -> empty cell
