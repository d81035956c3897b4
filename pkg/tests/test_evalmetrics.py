import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from blindrank import evalmetrics as em
from blindrank.estimates import EstimateRange, InvalidEstimate
from blindrank.evalmetrics import PredictionRecord

import oracles

TABLE4 = [[4, 15, 2, 0, 0],
          [0, 36, 32, 6, 6],
          [0, 6, 49, 26, 18],
          [0, 1, 13, 40, 45],
          [0, 0, 2, 5, 46]]


def rec(m_lo, m_hi, actual, tier="Mid", initial=None, name="u"):
    ini = EstimateRange(*initial) if initial else None
    return PredictionRecord(name, "THE", tier, "Europe", EstimateRange(m_lo, m_hi), actual, ini)


def recs_from(mids, actuals):
    return [rec(m, m, a) for m, a in zip(mids, actuals)]


# -- estimates ---------------------------------------------------------------

def test_estimate_range_basics():
    e = EstimateRange(328, 383)
    assert e.midpoint == 355.5 and e.width == 55 and not e.width_target_met
    assert EstimateRange(340, 380).width_target_met
    assert EstimateRange.from_dict(e.to_dict()) == e
    for bad in ({"rankMin": 5, "rankMax": 2}, {"rankMin": 0, "rankMax": 2}, {"rankMin": True, "rankMax": 3},
                {"rankMin": "a", "rankMax": 3}, {"rankMax": 3}):
        with pytest.raises(InvalidEstimate):
            EstimateRange.from_dict(bad)


@given(st.floats(1, 1e5), st.floats(0, 1e5))
def test_midpoint_exact(a, w):
    b = a + w
    assert EstimateRange(a, b).midpoint == (a + b) / 2


# -- error metrics -----------------------------------------------------------

def test_error_metrics_trivial():
    rs = recs_from([5, 10, 20], [5, 10, 20])
    assert em.mae(rs) == em.rmse(rs) == em.signed_error(rs) == 0


def test_mae_median_hand():
    rs = recs_from([11, 12, 13, 14], [10, 10, 10, 10])
    assert em.mae(rs) == 2.5 and em.median_ae(rs) == 2.5
    assert em.rmse(rs) == pytest.approx(math.sqrt((1 + 4 + 9 + 16) / 4))
    assert em.signed_error(rs) == 2.5
    assert em.signed_error(recs_from([8], [10])) == -2


def test_empty_inputs_raise():
    with pytest.raises(em.UndefinedMetric):
        em.mae([])


def test_pnmae_examples():
    assert em.pnmae(recs_from([3, 9], [3, 9]), 2092) == 0
    assert em.pnmae([rec(1047, 1047, 1)], 2092) == pytest.approx(50.02, abs=0.005)
    with pytest.raises(ValueError):
        em.pnmae([rec(1, 1, 1)], 1)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(1, 3000), st.integers(1, 3000)), min_size=1, max_size=50),
       st.integers(2, 5000))
def test_pnmae_identity(pairs, n):
    rs = recs_from(*zip(*pairs))
    assert abs(em.pnmae(rs, n) - em.mae(rs) / (n - 1) * 100) < 1e-9


def test_hit_rate_boundary_and_monotone():
    rs = recs_from([100, 150, 300], [50, 50, 50])
    assert em.hit_rate(rs, 50).count == 1  # AE 50 counts
    assert [em.hit_rate(rs, k).count for k in (25, 50, 100, 250)] == [0, 1, 2, 3]
    assert em.hit_rate(recs_from([1, 2], [1, 2]), 25).pct == 100
    assert str(em.HitRate(50, 73, 352)) == "20.7% (73/352)"


def test_range_metrics():
    rs = [rec(10, 20, 15), rec(10, 10, 10), rec(30, 70, 100)]
    rm = em.range_metrics(rs)
    assert (rm.covered, rm.n, rm.mean_width) == (2, 3, pytest.approx(50 / 3))
    assert em.range_metrics(rs[:2]).coverage_pct == 100


def test_memorization_index():
    northwestern = rec(328, 383, 355)
    assert northwestern.ae == 0.5 and northwestern.ae_rounded == 0 and northwestern.width == 55
    assert em.memorization_index([northwestern]) == 0
    assert em.exact_matches([northwestern]) == 1
    assert em.memorization_index([rec(5, 5, 5)] + [rec(1, 9, 20)] * 3) == 0.25


@given(st.lists(st.tuples(st.integers(1, 500), st.integers(1, 60), st.integers(1, 500)), min_size=1, max_size=30))
def test_mi_zero_when_all_widths_positive(rows):
    rs = [rec(lo, lo + w, a) for lo, w, a in rows]
    assert em.memorization_index(rs) == 0


@given(st.lists(st.integers(1, 2000), min_size=1, max_size=30))
def test_mi_one_when_all_exact(ranks):
    rs = [rec(a, a, a) for a in ranks]
    assert em.memorization_index(rs) == 1


@given(st.lists(st.tuples(st.integers(1, 300), st.integers(0, 3), st.integers(1, 300)), min_size=1, max_size=30))
def test_mi_bounded_by_exact_share(rows):
    rs = [rec(lo, lo + w, a) for lo, w, a in rows]
    mi = em.memorization_index(rs)
    assert 0 <= mi <= em.exact_matches(rs) / len(rs)


def test_round_ae_half_even():
    assert [em.round_ae(x) for x in (0.5, 1.5, 2.5, 0.49, 3.0)] == [0, 2, 2, 0, 3]
    assert em.fmt_pct(20.65) == "20.7" and em.fmt_pct(8.238636) == "8.2"


# -- Wilson ------------------------------------------------------------------

def test_wilson_table_value():
    low = em.wilson_lower(73, 352)
    assert 0.167 <= low <= 0.169
    assert low == pytest.approx(oracles.wilson_lower(73, 352), abs=1e-12)
    assert em.wilson_claim(73, 352) == 16
    assert em.wilson_lower(0, 20) == 0


def test_wilson_all_successes_increasing():
    vals = [em.wilson_lower(n, n) for n in (10, 100, 1000)]
    assert vals == sorted(vals) and vals[-1] > 0.99


@given(st.integers(1, 500), st.data())
def test_wilson_monotone_and_claim_bounded(n, data):
    k = data.draw(st.integers(0, n - 1))
    assert em.wilson_lower(k, n) <= em.wilson_lower(k + 1, n)
    assert em.wilson_claim(k, n) <= 100 * k / n


# -- correlations ------------------------------------------------------------

def test_correlation_trivial():
    a = [1, 5, 9, 20, 33]
    c = em.correlations(recs_from(a, a))
    assert c.spearman == pytest.approx(1) and c.pearson == pytest.approx(1) and c.kendall == pytest.approx(1)
    assert em.spearman([-x for x in a], a) == pytest.approx(-1)
    assert em.kendall_tau_b([-x for x in a], a) == pytest.approx(-1)


def test_five_points_with_tie():
    x, y = [1, 2, 2, 4, 5], [3, 1, 4, 4, 9]
    assert em.kendall_tau_b(x, y) == pytest.approx(oracles.kendall_tau_b(x, y), abs=1e-12)
    assert em.spearman(x, y) == pytest.approx(oracles.spearman(x, y), abs=1e-12)


def test_zero_variance_undefined():
    with pytest.raises(em.UndefinedMetric):
        em.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(em.UndefinedMetric):
        em.kendall_tau_b([1, 1, 1], [1, 2, 3])


small = st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=2, max_size=12)


@settings(max_examples=400)
@given(small)
def test_rank_correlations_match_bruteforce(pairs):
    x, y = map(list, zip(*pairs))
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    assert em.kendall_tau_b(x, y) == pytest.approx(oracles.kendall_tau_b(x, y), abs=1e-12)
    assert em.spearman(x, y) == pytest.approx(oracles.spearman(x, y), abs=1e-12)
    assert list(em.average_ranks(x)) == oracles.avg_ranks(x)


@settings(max_examples=200)
@given(small)
def test_monotone_invariance(pairs):
    x, y = map(list, zip(*pairs))
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    up = [v ** 3 + 7 for v in x]
    down = [-math.exp(v) for v in x]
    assert em.spearman(up, y) == pytest.approx(em.spearman(x, y), abs=1e-12)
    assert em.kendall_tau_b(down, y) == pytest.approx(-em.kendall_tau_b(x, y), abs=1e-12)


def test_calibration_ols():
    a = [1, 4, 9, 16, 30]
    assert em.calibration_ols(recs_from(a, a)) == pytest.approx((0, 1))
    alpha, beta = em.calibration_ols(recs_from([2 * v + 5 for v in a], a))
    assert alpha == pytest.approx(5) and beta == pytest.approx(2)
    with pytest.raises(em.UndefinedMetric):
        em.calibration_ols(recs_from([1, 2], [3, 3]))


# -- tier agreement ----------------------------------------------------------

def test_kappa_table4():
    m = em.ConfusionMatrix(np.array(TABLE4))
    assert m.n == 352 and m.agreement == 175
    assert abs(m.agreement_pct - 49.7) <= 0.05
    k = em.cohens_kappa(m)
    assert abs(k - 0.349) <= 0.0005
    assert k == pytest.approx(oracles.cohens_kappa(TABLE4), abs=1e-12)
    rows = np.array(TABLE4).sum(axis=1)
    cols = np.array(TABLE4).sum(axis=0)
    assert int(rows @ cols) == 28144 * 352 * 352 // 123904


def test_kappa_diagonal_and_degenerate():
    assert em.cohens_kappa(np.diag([3, 4, 5, 1, 2])) == pytest.approx(1)
    with pytest.raises(em.UndefinedMetric):
        em.cohens_kappa(np.array([[5, 0], [0, 0]]))


def test_kappa_random_predictions_near_zero():
    rng = np.random.default_rng(0)
    m = np.zeros((5, 5), int)
    for t, p in zip(rng.integers(0, 5, 20000), rng.integers(0, 5, 20000)):
        m[t, p] += 1
    assert abs(em.cohens_kappa(m)) < 0.02


def test_confusion_uses_record_tier_and_midpoint():
    rs = [rec(10, 20, 12, "Elite"), rec(100, 300, 30, "Strong"), rec(1000, 1100, 120, "Strong")]
    cm = em.tier_confusion(rs)
    assert cm.row("Elite").tolist() == [1, 0, 0, 0, 0]
    assert cm.row("Strong").tolist() == [0, 0, 1, 0, 1]


def test_summarize_and_roundtrip():
    rs = [rec(10, 50, 20, "Elite", (5, 100)), rec(200, 240, 300, "Mid", (100, 500)),
          rec(900, 950, 800, "Tail", (600, 1200))]
    s = em.summarize(rs, 2000)
    assert s.n == 3 and set(s.per_tier) == {"Elite", "Mid", "Tail"}
    assert dict(s.table_rows())["MAE"] == f"{em.mae(rs):.1f}"
    back = [PredictionRecord.from_dict(r.to_dict()) for r in rs]
    assert [r.to_dict() for r in back] == [r.to_dict() for r in rs]
    ini = em.summarize(rs, 2000, "initial")
    assert ini.mae == pytest.approx(em.mae(rs, "initial"))
