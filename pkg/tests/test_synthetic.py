import dataclasses

import numpy as np
import pytest
from scipy import stats

from emosmix.models import CoefficientSet, ExchangeableGrouping, stats_from_members
from emosmix.synthetic import ScenarioSpec, generate, truth_forecasts

GROUPING = ExchangeableGrouping((1, 3))
SMALL = dict(base_level=1.5, level_step=0.3, level_bounds=(0.5, 4.0), station_spread=0.5, member_spread=0.6)


def _members(cases):
    return np.array([c.members for c in cases])


def test_layout_and_ordering():
    spec = ScenarioSpec(7, 3, GROUPING, CoefficientSet("TN", tn=(0.5, 0.4, 0.2, 0.3, 0.5)), seed=1, **SMALL)
    cases = generate(spec)
    assert len(cases) == 21
    assert [(c.date, c.station_id) for c in cases] == sorted((c.date, c.station_id) for c in cases)
    assert {c.station_id for c in cases} == {"S000", "S001", "S002"}
    assert all(len(c.members) == 4 and c.observation >= 0 for c in cases)


def test_same_seed_same_data():
    spec = ScenarioSpec(20, 4, GROUPING, CoefficientSet("TN", tn=(0.5, 0.4, 0.2, 0.3, 0.5)), seed=9, **SMALL)
    assert generate(spec) == generate(spec)
    assert generate(spec) != generate(dataclasses.replace(spec, seed=10))


def test_constant_scale_truth_draws_from_fixed_width_tn():
    # b = (0.09, 0) gives scale 0.3 whatever the ensemble
    truth = CoefficientSet("TN", tn=(2.0, 0.2, 0.1, 0.09, 0.0))
    spec = ScenarioSpec(500, 10, GROUPING, truth, seed=3, **SMALL)
    cases = generate(spec)
    dist = truth_forecasts(spec, cases)
    np.testing.assert_allclose(dist.scale, 0.3, rtol=1e-15)
    pit = dist.cdf(np.array([c.observation for c in cases]))
    assert stats.kstest(pit, "uniform").pvalue > 0.001


def test_zero_member_spread_gives_zero_variance():
    spec = ScenarioSpec(
        30, 4, GROUPING, CoefficientSet("TN", tn=(0.5, 0.4, 0.2, 0.3, 0.5)), seed=2,
        **{**SMALL, "member_spread": 0.0},
    )
    members = _members(generate(spec))
    np.testing.assert_array_equal(stats_from_members(members, GROUPING).ensemble_variance, 0.0)


def test_group_bias_shifts_members():
    spec = ScenarioSpec(
        400, 5, GROUPING, CoefficientSet("TN", tn=(0.5, 0.4, 0.2, 0.3, 0.5)), seed=4,
        group_bias=(3.0, 0.0), **SMALL,
    )
    members = _members(generate(spec))
    assert members[:, 0].mean() - members[:, 1:].mean() == pytest.approx(3.0, abs=0.15)


def test_mixture_truth_is_calibrated():
    truth = CoefficientSet("MIXTURE", tn=(0.5, 0.9, 0.3, 0.5), ln=(1.0, 1.3, 1.0, 1.5), weight=0.7)
    grouping = ExchangeableGrouping.single(4)
    spec = ScenarioSpec(1000, 10, grouping, truth, seed=5, **SMALL)
    cases = generate(spec)
    pit = truth_forecasts(spec, cases).cdf(np.array([c.observation for c in cases]))
    n = pit.size
    ks = stats.kstest(pit, "uniform").statistic
    assert n == 10_000
    assert ks < 1.63 / np.sqrt(n)


def test_spec_validation():
    truth = CoefficientSet("TN", tn=(0.5, 0.4, 0.2, 0.3, 0.5))
    with pytest.raises(ValueError):
        ScenarioSpec(0, 3, GROUPING, truth)
    with pytest.raises(ValueError):
        ScenarioSpec(3, 3, GROUPING, truth, group_bias=(1.0,))
    with pytest.raises(ValueError):
        ScenarioSpec(3, 3, GROUPING, truth, level_bounds=(5.0, 1.0))
