import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_conformal.data import ClaimRecord, LongFormRecord
from adaptive_conformal.evaluation import (
    EPS,
    RATIO_CAP,
    calibration_error,
    claim_pr_auc,
    coverage_by_group,
    dolan_more,
    pr_auc,
    removed_fraction,
)

from conftest import brute_pr_auc


def test_coverage_by_group_arithmetic():
    results = [("a", i < 8, 0.5) for i in range(10)] + [("b", True, 0.25)] * 4
    rep = coverage_by_group(results, 0.2)
    assert rep.per_category["a"] == (0.8, 0.5, 10)
    assert rep.per_category["b"] == (1.0, 0.25, 4)
    assert rep.marginal_coverage == pytest.approx(12 / 14)
    weighted = sum(c * n for c, _, n in rep.per_category.values()) / 14
    assert abs(rep.marginal_coverage - weighted) < 1e-12
    assert "__marginal__" in rep.to_csv()


def test_coverage_by_group_empty():
    with pytest.raises(ValueError):
        coverage_by_group([], 0.2)


def _rec(m):
    return LongFormRecord("r", "c", [0.0], tuple(ClaimRecord("", 0.1 * i, 1) for i in range(m)))


def test_removed_fraction():
    rec = _rec(4)
    assert removed_fraction(rec, rec.claims[:2]) == 0.5
    assert removed_fraction(rec, rec.claims) == 0.0
    assert removed_fraction(rec, []) == 1.0


def test_pr_auc_perfect_and_errors():
    assert pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    with pytest.raises(ValueError, match="no positive"):
        pr_auc([0.1, 0.2], [0, 0])


def test_pr_auc_ties_grouped():
    # all tied: one threshold, precision = prevalence
    assert pr_auc([0.5] * 4, [1, 0, 0, 0]) == pytest.approx(0.25)


def test_claim_pr_auc_positive_is_incorrect():
    rec = LongFormRecord(
        "r", "c", [0.0], (ClaimRecord("", 0.9, 0), ClaimRecord("", 0.2, 1), ClaimRecord("", 0.1, 1))
    )
    assert claim_pr_auc([rec]) == 1.0


@settings(max_examples=300, deadline=None)
@given(
    data=st.lists(st.tuples(st.integers(0, 8), st.sampled_from([0, 1])), min_size=1, max_size=20),
)
def test_pr_auc_matches_oracle(data):
    scores = [s / 8 for s, _ in data]
    labels = [l for _, l in data]
    if sum(labels) == 0:
        return
    assert abs(pr_auc(scores, labels) - brute_pr_auc(scores, labels)) <= 1e-12
    warped = [math.exp(3 * s) - 7 for s in scores]
    assert abs(pr_auc(warped, labels) - pr_auc(scores, labels)) <= 1e-12


def test_calibration_error_examples():
    assert calibration_error(0.83, 0.2) == pytest.approx(0.03)
    assert calibration_error(0.8, 0.2) == 0
    assert calibration_error(0.5, 0.2) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        calibration_error(1.2, 0.2)


def test_dolan_more_hand_case():
    prof = dolan_more([[1, 2], [2, 2]], methods=["A", "B"])
    np.testing.assert_array_equal(prof.ratios, [[1, 2], [1, 1]])
    assert prof.rho("A", 1.0) == 1.0
    assert prof.rho("B", 1.0) == 0.5


def test_dolan_more_single_method():
    prof = dolan_more([[0.3], [0.1], [0.0]])
    assert np.all(prof.curve["method0"] == 1.0)


def test_dolan_more_zero_best():
    prof = dolan_more([[0.0, 0.1]])
    assert prof.ratios[0, 0] == 1.0
    assert (0.1 + EPS) / EPS > RATIO_CAP
    assert prof.ratios[0, 1] == RATIO_CAP


def test_delta_grid_shape():
    prof = dolan_more([[1.0, 3.0]])
    assert prof.deltas.size == 200
    assert prof.deltas[0] == 1.0 and prof.deltas[-1] == pytest.approx(RATIO_CAP)
    assert prof.to_csv().count("\n") == 201


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 12).flatmap(
        lambda p: st.integers(1, 4).flatmap(
            lambda m: st.lists(
                st.lists(st.floats(0, 10), min_size=m, max_size=m), min_size=p, max_size=p
            )
        )
    )
)
def test_dolan_more_invariants(errors):
    prof = dolan_more(errors)
    assert np.all(prof.ratios >= 1.0)
    assert np.all(prof.ratios.min(axis=1) == 1.0)
    for curve in prof.curve.values():
        assert np.all(np.diff(curve) >= 0)
        assert curve[-1] == 1.0
        assert np.all((curve >= 0) & (curve <= 1))
