import math
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strokeseg.metrics import (accuracy, classification_report, confusion_matrix, dsc,
                               error_count, fisher_exact, fisher_exact_table, iou,
                               patientwise_report)
from strokeseg.volume import LabelVolume


def exact_fisher(a, b, c, d):
    """Two-sided Fisher p by exact rational enumeration (independent of the log-gamma route)."""
    r1, c1, n = a + b, a + c, a + b + c + d

    def prob(k):
        return Fraction(math.comb(c1, k) * math.comb(n - c1, r1 - k), math.comb(n, r1))

    observed = prob(a)
    lo, hi = max(0, r1 + c1 - n), min(r1, c1)
    return float(sum(p for p in map(prob, range(lo, hi + 1)) if p <= observed))


class TestOverlap:
    def test_identical(self):
        m = np.zeros((3, 3, 3), bool)
        m[1, 1, :] = True
        assert dsc(m, m) == 1.0 and iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros(8, bool)
        b = a.copy()
        a[:2], b[4:6] = True, True
        assert dsc(a, b) == 0.0 and iou(a, b) == 0.0

    def test_voxel_count_oracle(self):
        a = np.zeros(10, bool)
        b = a.copy()
        a[0:4], b[2:6] = True, True
        assert dsc(a, b) == 0.5 and iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert dsc(np.zeros(4), np.zeros(4)) == 1.0 and iou(np.zeros(4), np.zeros(4)) == 1.0

    def test_dims_mismatch(self):
        with pytest.raises(ValueError, match="dims differ"):
            dsc(np.zeros((2, 2)), np.zeros((2, 3)))


def _case(dsc_target, cls):
    """Prediction/ground-truth pair with a given DSC on the class mask."""
    label = 1 if cls == "ischemic" else 2
    gt = np.zeros((1, 1, 10), np.uint8)
    gt[..., :5] = label
    pred = np.zeros_like(gt)
    k = int(round(dsc_target * 5))  # |A|=|B|=5, overlap k -> DSC k/5
    pred[..., :k] = label
    pred[..., 5:10 - k] = label
    return LabelVolume(pred), LabelVolume(gt), cls


class TestReport:
    def test_perfect_single_case(self):
        gt = LabelVolume(np.ones((2, 2, 2)))
        rep = patientwise_report([(gt, gt, "ischemic")])
        assert rep.columns["IS"]["dsc_mean"] == 1.0 and rep.columns["IS"]["dsc_std"] == 0.0
        assert rep.columns["IH+IS"]["iou_mean"] == 1.0

    def test_mean_and_population_std(self):
        rep = patientwise_report([_case(0.4, "ischemic"), _case(0.6, "ischemic")])
        assert rep.columns["IS"]["dsc_mean"] == pytest.approx(0.5)
        assert rep.columns["IS"]["dsc_std"] == pytest.approx(0.1)
        assert rep.std_kind == "population"

    def test_columns_and_healthy_skipped(self):
        h = LabelVolume(np.zeros((1, 1, 10)))
        rep = patientwise_report([_case(0.4, "ischemic"), _case(1.0, "hemorrhagic"), (h, h, "healthy")])
        assert rep.columns["IH"]["n"] == 1 and rep.columns["IS"]["n"] == 1 and rep.columns["IH+IS"]["n"] == 2
        assert rep.columns["IH+IS"]["dsc_mean"] == pytest.approx(0.7)
        assert "IH" in rep.table() and "population" in rep.table()

    def test_scored_on_gt_class_only(self):
        gt = np.zeros((1, 1, 4), np.uint8)
        gt[..., :2] = 1
        pred = gt.copy()
        pred[..., 3] = 2  # a stray hemorrhagic voxel does not touch the ischemic score
        rep = patientwise_report([(pred, gt, "ischemic")])
        assert rep.cases[0].dsc == 1.0


class TestClassification:
    def test_seven_errors_of_180(self):
        truth = ["ischemic"] * 60 + ["hemorrhagic"] * 60 + ["healthy"] * 60
        pred = list(truth)
        for i in range(7):
            pred[i] = "healthy"
        assert error_count(truth, pred) == 7
        assert accuracy(truth, pred) == pytest.approx(173 / 180)
        assert round(accuracy(truth, pred), 4) == 0.9611

    def test_extremes(self):
        assert accuracy(["a", "b"], ["a", "b"]) == 1.0
        assert accuracy(["a", "b"], ["b", "a"]) == 0.0
        with pytest.raises(ValueError):
            accuracy(["a"], ["a", "b"])

    def test_confusion(self):
        m = confusion_matrix(["healthy", "ischemic", "ischemic"], ["healthy", "hemorrhagic", "ischemic"])
        assert m == [[1, 0, 0], [0, 1, 1], [0, 0, 0]]
        rep = classification_report(["healthy", "ischemic"], ["healthy", "healthy"])
        assert rep.errors == 1 and rep.accuracy == 0.5


class TestFisher:
    @pytest.mark.parametrize("e,published", [(15, 0.122), (19, 0.024), (23, 0.004), (18, 0.037)])
    def test_published_values(self, e, published):
        assert fisher_exact(e, 7, 180).p_value == pytest.approx(published, abs=0.005)

    @pytest.mark.parametrize("e", [6, 8])
    def test_on_par(self, e):
        assert fisher_exact(e, 7, 180).p_value >= 0.99

    def test_large_difference_floor(self):
        assert fisher_exact(33, 7, 180).p_value <= 0.001

    def test_identical_groups(self):
        assert fisher_exact(5, 5, 10).p_value == 1.0
        assert fisher_exact(0, 0, 50).p_value == 1.0

    def test_result_shape(self):
        r = fisher_exact(19, 7, 180)
        assert r.table == [[19, 161], [7, 173]]
        assert r.to_dict()["method"] == "fisher-exact-two-sided"

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            fisher_exact(200, 7, 180)
        with pytest.raises(ValueError):
            fisher_exact_table([[-1, 2], [3, 4]])

    def test_large_n_fast(self):
        t0 = time.perf_counter()
        p = fisher_exact(5000, 5100, 1_000_000).p_value
        assert 0 <= p <= 1 and time.perf_counter() - t0 < 1.0


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_fisher_matches_rational_oracle(a, b, c, d):
    assert fisher_exact_table([[a, b], [c, d]]) == pytest.approx(exact_fisher(a, b, c, d), rel=1e-9, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40), st.data())
def test_dsc_iou_relation(a, data):
    b = data.draw(st.lists(st.booleans(), min_size=len(a), max_size=len(a)))
    d, j = dsc(a, b), iou(a, b)
    assert 0 <= j <= d <= 1
    assert d == pytest.approx(2 * j / (1 + j))
