import numpy as np
import pytest
import scipy.special as sp
import scipy.stats as ss
from hypothesis import given, settings, strategies as st

from pcbfl.stats import (DegenerateTableError, UndefinedStatisticError, anova_oneway, betainc, bonferroni,
                         characterize_clusters, chi2_independence, chi2_sf, f_sf, gammainc_lower, gammainc_upper)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 40), st.floats(0.0, 80))
def test_incomplete_gamma_matches_scipy(a, x):
    assert gammainc_lower(a, x) == pytest.approx(sp.gammainc(a, x), abs=1e-10)
    assert gammainc_upper(a, x) == pytest.approx(sp.gammaincc(a, x), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(0.0, 1.0))
def test_incomplete_beta_matches_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(sp.betainc(a, b, x), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 30), st.integers(1, 30), st.integers(1, 200))
def test_distribution_tails_match_scipy(f, d1, d2):
    assert f_sf(f, d1, d2) == pytest.approx(ss.f.sf(f, d1, d2), abs=1e-10)
    assert chi2_sf(f, d1) == pytest.approx(ss.chi2.sf(f, d1), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10 ** 6))
def test_anova_matches_scipy(k, seed):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(loc=i * 0.3, size=rng.integers(2, 20)) for i in range(k)]
    f, p = anova_oneway(groups)
    ref = ss.f_oneway(*groups)
    assert f == pytest.approx(ref.statistic, rel=1e-9)
    assert p == pytest.approx(ref.pvalue, abs=1e-10)


def test_chi2_matches_scipy_without_continuity_correction():
    table = [[10, 20, 30], [25, 15, 5], [7, 7, 9]]
    stat, p, expected = chi2_independence(table)
    ref = ss.chi2_contingency(table, correction=False)
    assert stat == pytest.approx(ref[0], rel=1e-12)
    assert p == pytest.approx(ref[1], abs=1e-12)
    np.testing.assert_allclose(expected, ref[3])


def test_degenerate_inputs():
    with pytest.raises(UndefinedStatisticError):
        anova_oneway([[1.0, 1.0], [1.0, 1.0]])
    assert anova_oneway([[1.0, 1.0], [2.0, 2.0]]) == (np.inf, 0.0)
    with pytest.raises(DegenerateTableError):
        chi2_independence([[1, 0], [2, 0]])


def test_bonferroni_threshold_is_alpha_over_m():
    flags = bonferroni([0.01, 0.0125, 0.0126, 0.2], alpha=0.05)
    assert flags.tolist() == [True, False, False, False]


def test_characterize_clusters():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1, 2], 50)
    values = np.column_stack([labels + rng.normal(0, 0.1, 150), rng.normal(size=150)])
    regions = np.where(labels == 0, "South", "West")
    st_ = characterize_clusters(values, labels, ["a", "b"], regions, ["Midwest", "Northeast", "South", "West"])
    assert st_.significant.tolist() == [True, False]
    assert st_.threshold == 0.025
    assert st_.region_table.shape == (2, 3) and st_.chi2_pvalue < 1e-10
