import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import (
    auprc_by_enumeration,
    dice_by_counting,
    masked_mean_abs,
    permutation_test_exact,
)
from pddpm.metrics import EvalReport, ScoreVector, auprc, dice, l1_healthy, permutation_test


def test_dice_identical_masks():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[1:3, 1:3, 1:3] = True
    assert dice(m, m) == 1.0


def test_dice_disjoint():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, 0] = True
    b[3, 3] = True
    assert dice(a, b) == 0.0


def test_dice_counting_case():
    pred = np.zeros(12, dtype=bool)
    gt = np.zeros(12, dtype=bool)
    pred[:4] = True          # |pred| = 4
    gt[1:7] = True           # |gt| = 6, overlap = 3
    assert dice(pred, gt) == pytest.approx(0.6)


def test_dice_both_empty():
    z = np.zeros((3, 3), dtype=bool)
    assert dice(z, z) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(0, 2**32 - 1))
def test_dice_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 4, 4)) > 0.6
    b = rng.random((3, 4, 4)) > 0.6
    assert dice(a, b) == dice(b, a)
    perm = rng.permutation(a.size)
    assert dice(a.ravel()[perm], b.ravel()[perm]) == pytest.approx(dice(a, b))
    assert dice(a, b) == pytest.approx(dice_by_counting(a, b))


def test_auprc_perfect_separation():
    gt = np.array([0, 0, 1, 1], dtype=bool)
    assert auprc(gt.astype(float), gt) == pytest.approx(1.0)


def test_auprc_constant_scores_equal_prevalence():
    gt = np.zeros(20, dtype=bool)
    gt[:7] = True
    scores = np.full(20, 0.5)
    assert auprc(scores, gt) == pytest.approx(7 / 20)


def test_auprc_toy_case_matches_enumeration():
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.55, 0.3, 0.2, 0.1])
    gt = np.array([1, 0, 1, 1, 0, 0, 1, 0], dtype=bool)
    assert auprc(scores, gt) == pytest.approx(auprc_by_enumeration(scores, gt), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_auprc_random_cases_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    scores = rng.choice([0.1, 0.25, 0.5, 0.8], size=30)
    gt = rng.random(30) > 0.6
    if not gt.any():
        gt[0] = True
    assert auprc(scores, gt) == pytest.approx(auprc_by_enumeration(scores, gt), abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_auprc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(40)
    gt = rng.random(40) > 0.5
    if not gt.any():
        gt[0] = True
    a = auprc(scores, gt)
    b = auprc(np.exp(3.0 * scores) + 2.0, gt)
    assert a == pytest.approx(b, abs=1e-12)


def test_auprc_empty_gt_rejected():
    with pytest.raises(ValueError):
        auprc(np.ones(4), np.zeros(4, dtype=bool))


def test_l1_healthy_trivial():
    x = np.random.default_rng(0).random((1, 3, 4, 4)).astype(np.float32)
    mask = np.ones((3, 4, 4), dtype=bool)
    assert l1_healthy(x, x, mask) == 0.0
    assert l1_healthy(x, x + 0.01, mask) == pytest.approx(0.01, rel=1e-4)


def test_l1_healthy_masked_mean_oracle():
    rng = np.random.default_rng(1)
    x = rng.random((1, 3, 5, 5))
    r = rng.random((1, 3, 5, 5))
    mask = rng.random((3, 5, 5)) > 0.5
    assert l1_healthy(x, r, mask) == pytest.approx(masked_mean_abs(x, r, mask), rel=1e-12)


def test_l1_healthy_empty_mask_rejected():
    with pytest.raises(ValueError):
        l1_healthy(np.ones((1, 2, 2, 2)), np.ones((1, 2, 2, 2)), np.zeros((2, 2, 2), dtype=bool))


def _sv(values, prefix="s"):
    return ScoreVector(np.asarray(values, dtype=float), tuple(f"{prefix}{i}" for i in range(len(values))))


def test_permutation_identical_groups():
    a = _sv([0.5, 0.6, 0.7], "a")
    b = _sv([0.5, 0.6, 0.7], "b")
    p = permutation_test(a, b, n_perm=2000, seed=0)
    assert p >= 0.5


def test_permutation_matches_exhaustive_enumeration():
    a = _sv([0.9, 0.95, 0.85], "a")
    b = _sv([0.1, 0.2, 0.15], "b")
    p_mc = permutation_test(a, b, n_perm=10_000, seed=1)
    p_exact = permutation_test_exact(a.values, b.values)
    assert abs(p_mc - p_exact) <= 0.05
    assert p_exact == pytest.approx(1 / 20)  # only one of C(6,3) splits is as extreme


def test_permutation_deterministic_per_seed():
    a = _sv([0.3, 0.6, 0.8, 0.2], "a")
    b = _sv([0.4, 0.5, 0.1, 0.9], "b")
    p1 = permutation_test(a, b, n_perm=500, seed=7)
    p2 = permutation_test(a, b, n_perm=500, seed=7)
    assert p1 == p2


@given(st.integers(0, 2**32 - 1))
def test_permutation_p_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a = _sv(rng.random(4), "a")
    b = _sv(rng.random(5), "b")
    p = permutation_test(a, b, n_perm=200, seed=seed)
    assert 0.0 <= p <= 1.0


def test_permutation_converges_to_exact_for_small_groups():
    rng = np.random.default_rng(3)
    a = _sv(rng.random(4), "a")
    b = _sv(rng.random(4), "b")
    p_exact = permutation_test_exact(a.values, b.values)
    p_mc = permutation_test(a, b, n_perm=20_000, seed=11)
    assert abs(p_mc - p_exact) < 0.02


def test_permutation_bad_nperm():
    a = _sv([1.0], "a")
    b = _sv([2.0], "b")
    with pytest.raises(ValueError):
        permutation_test(a, b, n_perm=0)


def test_score_vector_validation():
    with pytest.raises(ValueError):
        ScoreVector(np.array([1.0, 2.0]), ("x", "x"))
    with pytest.raises(ValueError):
        ScoreVector(np.array([np.nan]), ("x",))


def test_eval_report_formatting():
    report = EvalReport(
        dice_mean=0.49, dice_std=0.0084, auprc_mean=0.5407, auprc_std=0.0106,
        l1_healthy_mean=0.01105, threshold=0.12,
        per_sample={"dice": _sv([0.48, 0.50])},
    )
    lines = report.summary_lines()
    assert lines[0] == "DICE [%]:  49.00 +- 0.84"
    assert lines[1] == "AUPRC [%]: 54.07 +- 1.06"
    assert lines[2] == "l1 (1e-3): 11.05"
    d = report.as_dict()
    assert d["per_sample"]["dice"]["values"] == [0.48, 0.50]
