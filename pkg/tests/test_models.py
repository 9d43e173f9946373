import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emosmix.distributions import EmpiricalDistribution, LogNormal, MixtureTnLn, TruncNormal
from emosmix.errors import InfeasibleLinkError
from emosmix.models import (
    CoefficientSet,
    EnsembleStats,
    ExchangeableGrouping,
    ForecastCase,
    ModelKind,
    empirical_forecast,
    ensemble_stats,
    link,
    link_ln,
    link_mixture,
    link_regime_switch,
    link_tn,
    stats_from_members,
)

DAY = dt.date(2012, 5, 1)


def _stats(group_sums, variance, median=1.0):
    return EnsembleStats(np.asarray(group_sums, float), 0.0, variance, median)


def test_constant_ensemble_statistics():
    case = ForecastCase(DAY, "A", [2.5] * 8, 3.0)
    s = ensemble_stats(case, ExchangeableGrouping((3, 5)))
    assert s.ensemble_variance == 0.0
    assert s.ensemble_mean == 2.5
    assert s.ensemble_median == 2.5
    np.testing.assert_array_equal(s.group_sums, [7.5, 12.5])


def test_small_ensemble_statistics():
    s = ensemble_stats(ForecastCase(DAY, "A", [3.0, 1.0, 2.0]), ExchangeableGrouping.single(3))
    assert (s.ensemble_mean, s.ensemble_variance, s.ensemble_median) == (2.0, 1.0, 2.0)


def test_control_plus_exchangeable_group_sums():
    case = ForecastCase(DAY, "A", [3.0] + [2.0] * 10)
    s = ensemble_stats(case, ExchangeableGrouping((1, 10), ("control", "ens")))
    np.testing.assert_array_equal(s.group_sums, [3.0, 20.0])


def test_grouping_size_mismatch_is_rejected():
    with pytest.raises(ValueError, match="expected 4 members"):
        ExchangeableGrouping((2, 2)).group_sums(np.ones(5))
    with pytest.raises(ValueError):
        ExchangeableGrouping((2, 0))


def test_negative_member_is_rejected():
    with pytest.raises(ValueError):
        ForecastCase(DAY, "A", [1.0, -0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 30, allow_nan=False), min_size=6, max_size=6), st.randoms(use_true_random=False))
def test_statistics_invariant_under_within_group_permutation(members, random):
    grouping = ExchangeableGrouping((2, 4))
    a = stats_from_members(members, grouping)
    first, second = members[:2], members[2:]
    random.shuffle(first)
    random.shuffle(second)
    b = stats_from_members(first + second, grouping)
    np.testing.assert_array_equal(a.group_sums, b.group_sums)
    assert a.ensemble_variance == b.ensemble_variance


def test_identity_tn_link():
    coeffs = CoefficientSet(ModelKind.TN, tn=(0, 1, 1, 0))
    tn = link_tn(coeffs, _stats([3.0], 4.0))
    assert (tn.location, tn.scale) == (3.0, 1.0)


def test_tn_link_example():
    tn = link_tn(CoefficientSet("TN", tn=(0.5, 0.9, 0.3, 0.5)), _stats([2.0], 1.0))
    assert tn.location == pytest.approx(2.3, abs=1e-15)
    assert tn.scale == pytest.approx(math.sqrt(0.8), rel=1e-15)


def test_intercept_only_location_ignores_ensemble():
    coeffs = CoefficientSet("TN", tn=(1.7, 0, 0, 1, 0))
    locs = [link_tn(coeffs, _stats(g, 2.0)).location for g in ([0, 0], [5, 9], [30, 1])]
    assert locs == [1.7, 1.7, 1.7]


def test_tn_link_rejects_nonpositive_variance():
    with pytest.raises(InfeasibleLinkError):
        link_tn(CoefficientSet("TN", tn=(0, 1, 0, 0)), _stats([1.0], 0.0))


def test_ln_link_example():
    coeffs = CoefficientSet("LN", ln=(0, 1, 1, 0))
    ln = link_ln(coeffs, _stats([2.0], 0.0))
    assert ln.location == pytest.approx(math.log(4 / math.sqrt(5)), rel=1e-14)
    assert ln.shape == pytest.approx(math.sqrt(math.log(1.25)), rel=1e-14)
    assert ln.mean() == pytest.approx(2.0, rel=1e-14)
    assert ln.variance() == pytest.approx(1.0, rel=1e-13)


def test_ln_link_rejects_nonpositive_mean():
    with pytest.raises(InfeasibleLinkError):
        link_ln(CoefficientSet("LN", ln=(-1, 0.1, 1, 0)), _stats([1.0], 1.0))


def test_mixture_link_reduces_to_components():
    stats = _stats([[2.0], [6.0]], np.array([1.0, 2.5]))
    tn_block, ln_block = (0.5, 0.9, 0.3, 0.5), (1.0, 1.1, 0.8, 1.2)
    x = np.array([[0.5], [3.0], [8.0]])
    tn = link_tn(CoefficientSet("TN", tn=tn_block), stats)
    ln = link_ln(CoefficientSet("LN", ln=ln_block), stats)
    for w, ref in ((1.0, tn), (0.0, ln)):
        mix = link_mixture(CoefficientSet("MIXTURE", tn=tn_block, ln=ln_block, weight=w), stats)
        np.testing.assert_array_equal(mix.cdf(x), ref.cdf(x))
    half = link_mixture(CoefficientSet("MIXTURE", tn=tn_block, ln=ln_block, weight=0.5), stats)
    np.testing.assert_allclose(half.pdf(x), 0.5 * tn.pdf(x) + 0.5 * ln.pdf(x), rtol=1e-14)


def test_regime_switch_branches():
    coeffs = CoefficientSet("REGIME_SWITCH", tn=(0, 1, 1, 0), ln=(0, 1, 1, 0), threshold=8.0)
    assert isinstance(link_regime_switch(coeffs, _stats([5.0], 1.0, median=5.0)), TruncNormal)
    assert isinstance(link_regime_switch(coeffs, _stats([9.0], 1.0, median=9.0)), LogNormal)
    # ties go to the LN branch
    assert isinstance(link_regime_switch(coeffs, _stats([8.0], 1.0, median=8.0)), LogNormal)


def test_regime_switch_batch_matches_single_cases():
    coeffs = CoefficientSet("REGIME_SWITCH", tn=(0.2, 0.3, 0.5, 0.4), ln=(0.5, 0.25, 0.6, 0.3), threshold=4.0)
    rng = np.random.default_rng(2)
    members = rng.uniform(0, 9, (30, 4))
    grouping = ExchangeableGrouping.single(4)
    batch = link(coeffs, stats_from_members(members, grouping))
    assert isinstance(batch, MixtureTnLn)
    obs = rng.uniform(0, 9, 30)
    for i in range(30):
        single = link(coeffs, stats_from_members(members[i], grouping))
        expected = TruncNormal if np.median(members[i]) < 4.0 else LogNormal
        assert isinstance(single, expected)
        assert batch.take(i).crps(obs[i]) == pytest.approx(single.crps(obs[i]), abs=1e-14)


def test_regime_switch_ignores_infeasible_unused_branch():
    # LN mean would be negative, but no case uses the LN branch
    coeffs = CoefficientSet("REGIME_SWITCH", tn=(0, 0.25, 1, 0), ln=(-100, 0.25, 1, 0), threshold=50.0)
    members = np.array([[1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 3.0, 3.0]])
    dist = link(coeffs, stats_from_members(members, ExchangeableGrouping.single(4)))
    assert np.all(np.isfinite(dist.crps(np.array([1.0, 2.0]))))


def test_coefficient_validation():
    with pytest.raises(ValueError):
        CoefficientSet("TN", tn=(0, 1, -0.1, 1))
    with pytest.raises(ValueError):
        CoefficientSet("MIXTURE", tn=(0, 1, 1, 1), ln=(0, 1, 1, 1), weight=1.2)
    with pytest.raises(ValueError):
        CoefficientSet("REGIME_SWITCH", tn=(0, 1, 1, 1), ln=(0, 1, 1, 1))
    with pytest.raises(ValueError):
        CoefficientSet("LN", tn=(0, 1, 1, 1))


def test_empirical_forecast_is_step_function():
    e = empirical_forecast([3.0, 1.0, 2.0])
    assert isinstance(e, EmpiricalDistribution)
    assert e.cdf(2.0) == pytest.approx(2 / 3)
