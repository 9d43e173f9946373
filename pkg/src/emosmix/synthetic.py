"""Synthetic ensemble/observation data with a known EMOS truth.

The ensemble comes from a latent process: each station has a daily level
following a bounded random walk, and members are drawn around that level
(plus a per-group bias) from a normal law truncated at zero whose spread
varies from day to day. The observation of each case is then drawn from the
truth model linked to that case's ensemble, so the truth forecasts are
calibrated by construction.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .distributions import TruncNormal
from .errors import InfeasibleLinkError
from .models import CoefficientSet, ExchangeableGrouping, ForecastCase, link, stats_from_members


@dataclass(frozen=True)
class ScenarioSpec:
    n_days: int
    n_stations: int
    grouping: ExchangeableGrouping
    truth: CoefficientSet
    seed: int = 0
    start_date: dt.date = dt.date(2010, 1, 1)
    base_level: float = 6.0
    level_step: float = 1.0
    level_bounds: tuple = (1.0, 15.0)
    station_spread: float = 1.0
    member_spread: float = 1.0
    spread_variability: float = 0.5
    group_bias: Optional[tuple] = None
    max_retries: int = 20

    def __post_init__(self):
        if self.n_days < 1 or self.n_stations < 1:
            raise ValueError("n_days and n_stations must be positive")
        if self.member_spread < 0:
            raise ValueError("member_spread must be non-negative")
        lo, hi = self.level_bounds
        if not 0 <= lo < hi:
            raise ValueError("level_bounds must satisfy 0 <= low < high")
        if self.group_bias is not None and len(self.group_bias) != self.grouping.n_groups:
            raise ValueError("one group bias per exchangeable group is required")


def _levels(spec, rng):
    lo, hi = spec.level_bounds
    level = np.clip(spec.base_level + spec.station_spread * rng.standard_normal(spec.n_stations), lo, hi)
    out = np.empty((spec.n_days, spec.n_stations))
    for day in range(spec.n_days):
        out[day] = level
        level = np.clip(level + spec.level_step * rng.standard_normal(spec.n_stations), lo, hi)
    return out


def _draw_members(spec, level, rng):
    bias = np.zeros(spec.grouping.n_groups) if spec.group_bias is None else np.asarray(spec.group_bias, float)
    center = level[:, None] + np.repeat(bias, spec.grouping.group_sizes)[None, :]
    if spec.member_spread == 0:
        return np.maximum(center, 0.0)
    spread = spec.member_spread * np.exp(spec.spread_variability * rng.standard_normal(level.shape))
    center = np.maximum(center, 0.0)
    return TruncNormal(center, np.broadcast_to(spread[:, None], center.shape)).sample(rng, 1)[0]


def generate(spec):
    """Generate ``n_days * n_stations`` forecast cases ordered by date, then station."""
    root = np.random.SeedSequence(spec.seed)
    walk_seq, day_seq = root.spawn(2)
    levels = _levels(spec, np.random.default_rng(walk_seq))
    stations = [f"S{j:03d}" for j in range(spec.n_stations)]
    cases = []
    for day, seq in enumerate(day_seq.spawn(spec.n_days)):
        rng = np.random.default_rng(seq)
        for _ in range(spec.max_retries):
            members = _draw_members(spec, levels[day], rng)
            try:
                truth = link(spec.truth, stats_from_members(members, spec.grouping))
                break
            except InfeasibleLinkError:
                continue
        else:
            raise InfeasibleLinkError(f"truth model infeasible on day {day} after {spec.max_retries} draws")
        obs = truth.sample(rng, 1)[0]
        date = spec.start_date + dt.timedelta(days=day)
        cases.extend(
            ForecastCase(date, stations[j], tuple(members[j]), float(obs[j])) for j in range(spec.n_stations)
        )
    return cases


def truth_forecasts(spec, cases):
    """The data-generating predictive distributions of ``cases`` (batched)."""
    members = np.array([c.members for c in cases])
    return link(spec.truth, stats_from_members(members, spec.grouping))
