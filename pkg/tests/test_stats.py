import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from blindrank import stats

import oracles


# -- distribution tails, checked against arbitrary precision -----------------

@pytest.mark.parametrize("z", [0.0, 0.5, 1.0, 1.96, 2.5, 3.7, 6.0])
def test_normal_tail_vs_mpmath(z):
    want = float(mpmath.erfc(mpmath.mpf(z) / mpmath.sqrt(2)))
    assert stats.normal_two_sided(z) == pytest.approx(want, rel=1e-10, abs=1e-15)
    assert stats.normal_two_sided(-z) == stats.normal_two_sided(z)


@pytest.mark.parametrize("x, df", [(0.5, 1), (1.786, 1), (5.333, 1), (3.0, 4), (42.09, 4), (12.0, 7)])
def test_chi2_tail_vs_mpmath(x, df):
    want = float(mpmath.gammainc(mpmath.mpf(df) / 2, mpmath.mpf(x) / 2, regularized=True))
    assert stats.chi2_sf(x, df) == pytest.approx(want, rel=1e-10)
    assert stats.chi2_sf(0, df) == 1.0


# -- Wilcoxon ----------------------------------------------------------------

def test_wilcoxon_small_by_hand():
    x = [5, 7, 9, 11, 13, 15]
    y = [4, 5, 6, 7, 8, 9]
    r = stats.wilcoxon_signed_rank(x, y)
    assert r.statistic == 0 and r.p_value == pytest.approx(2 / 64) and r.method == "exact"


def test_wilcoxon_zeros_and_small_n():
    assert stats.wilcoxon_signed_rank([1, 2, 3], [1, 2, 3]).degenerate
    with pytest.raises(ValueError):
        stats.wilcoxon_signed_rank([1, 2, 3, 4], [0, 0, 0, 0])
    with pytest.raises(ValueError):
        stats.wilcoxon_signed_rank([1, 2], [1])
    with pytest.raises(ValueError):
        stats.wilcoxon_signed_rank([1] * 6, [0] * 6, method="bogus")


diffs = st.lists(st.integers(-4, 4).filter(bool), min_size=5, max_size=8)


@settings(max_examples=300)
@given(diffs)
def test_wilcoxon_matches_enumeration(d):
    r = stats.wilcoxon_signed_rank(d, [0] * len(d), method="exact")
    w, p = oracles.wilcoxon_exact_p(d)
    assert r.statistic == pytest.approx(w, abs=1e-12)
    assert r.p_value == pytest.approx(p, abs=1e-12)


def test_wilcoxon_normal_large_n_against_exact():
    rng = np.random.default_rng(4)
    d = rng.normal(0.3, 1, 25)
    ex = stats.wilcoxon_signed_rank(d, np.zeros(25), method="exact")
    no = stats.wilcoxon_signed_rank(d, np.zeros(25), method="normal")
    assert ex.statistic == no.statistic
    assert abs(ex.p_value - no.p_value) < 0.01
    assert stats.wilcoxon_signed_rank(np.r_[d, d], np.zeros(50)).method == "normal"


# -- McNemar -----------------------------------------------------------------

def test_mcnemar_worked_value():
    r = stats.mcnemar_counts(10, 2)
    assert abs(r.statistic - 5.333) <= 0.001 and r.significant
    assert stats.mcnemar_counts(10, 2, correction=True).statistic == pytest.approx(49 / 12)


def test_mcnemar_from_vectors():
    before = [True] * 10 + [False] * 2 + [True] * 5 + [False] * 3
    after = [False] * 10 + [True] * 2 + [True] * 5 + [False] * 3
    r = stats.mcnemar(before, after)
    assert r.statistic == pytest.approx(64 / 12) and r.n == 20


def test_mcnemar_degenerate():
    r = stats.mcnemar_counts(0, 0)
    assert r.degenerate and r.p_value == 1


@given(st.integers(0, 200), st.integers(0, 200))
def test_mcnemar_symmetric(b, c):
    assume(b + c > 0)
    assert stats.mcnemar_counts(b, c).statistic == stats.mcnemar_counts(c, b).statistic
    assert 0 <= stats.mcnemar_counts(b, c).p_value <= 1


# -- Kruskal-Wallis ----------------------------------------------------------

def test_kw_hand_value():
    g = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]]
    r = stats.kruskal_wallis(g)
    assert r.statistic == pytest.approx(oracles.kruskal_h(g)) and r.method == "chi2"
    assert r.statistic == pytest.approx(12 / (12 * 13) * (100 + 676 + 1764) / 4 - 39)


def test_kw_degenerate_and_errors():
    assert stats.kruskal_wallis([[3, 3], [3, 3, 3]]).degenerate
    with pytest.raises(ValueError):
        stats.kruskal_wallis([[1, 2, 3]])
    with pytest.raises(ValueError):
        stats.kruskal_wallis([[1], []])


@st.composite
def small_groups(draw):
    k = draw(st.integers(2, 3))
    sizes = draw(st.lists(st.integers(1, 3), min_size=k, max_size=k))
    assume(sum(sizes) <= 8)
    return [draw(st.lists(st.integers(0, 5), min_size=s, max_size=s)) for s in sizes]


@settings(max_examples=40, deadline=None)
@given(small_groups())
def test_kw_exact_matches_enumeration(groups):
    pooled = [v for g in groups for v in g]
    assume(len(set(pooled)) > 1)
    r = stats.kruskal_wallis(groups, method="exact")
    h, p = oracles.kruskal_exact_p(groups)
    assert r.statistic == pytest.approx(max(0, h), abs=1e-9)
    assert r.p_value == pytest.approx(p, abs=1e-12)


# -- bootstrap ---------------------------------------------------------------

def test_bootstrap_constant_and_reproducible():
    data = np.full(30, 7.0)
    ci = stats.bootstrap_ci(data, np.mean, B=200)
    assert ci.lower == ci.upper == ci.point == 7
    rng = np.random.default_rng(1)
    x = rng.exponential(size=60)
    a = stats.bootstrap_ci(x, np.mean, B=1200, seed=5)
    assert a == stats.bootstrap_ci(x, np.mean, B=1200, seed=5, workers=3)
    assert a != stats.bootstrap_ci(x, np.mean, B=1200, seed=6)
    assert a.lower < a.point < a.upper


def test_bootstrap_coverage_of_normal_mean():
    rng = np.random.default_rng(11)
    covered = 0
    for i in range(60):
        x = rng.normal(3, 2, 40)
        ci = stats.bootstrap_ci(x, np.mean, B=300, seed=i)
        covered += ci.lower <= 3 <= ci.upper
    assert covered >= 50


def test_bootstrap_on_records_lists():
    ci = stats.bootstrap_ci(list(range(20)), lambda xs: sum(xs) / len(xs), B=100, name="mean")
    assert ci.statistic == "mean" and ci.to_dict()["B"] == 100
    with pytest.raises(ValueError):
        stats.bootstrap_ci([1], np.mean)
    with pytest.raises(ValueError):
        stats.bootstrap_ci([1, 2], np.mean, B=10)
