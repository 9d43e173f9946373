"""EMOS links from ensemble forecasts to predictive distributions.

The location of the truncated normal (and the mean of the log-normal) is an
affine function of per-group member sums; the variance is affine in the
ensemble variance. Members of one exchangeable group share a coefficient.
"""

from __future__ import annotations

import datetime as dt
import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .distributions import EmpiricalDistribution, LogNormal, MixtureTnLn, TruncNormal
from .errors import InfeasibleLinkError


class ModelKind(str, enum.Enum):
    TN = "TN"
    LN = "LN"
    MIXTURE = "MIXTURE"
    REGIME_SWITCH = "REGIME_SWITCH"


@dataclass(frozen=True)
class ExchangeableGrouping:
    """Partition of ``M`` ensemble members into consecutive exchangeable groups."""

    group_sizes: tuple
    names: Optional[tuple] = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.group_sizes)
        if not sizes:
            raise ValueError("grouping needs at least one group")
        if any(s < 1 for s in sizes):
            raise ValueError(f"group sizes must be positive, got {sizes}")
        object.__setattr__(self, "group_sizes", sizes)
        if self.names is not None:
            names = tuple(str(n) for n in self.names)
            if len(names) != len(sizes):
                raise ValueError("one name per group is required")
            object.__setattr__(self, "names", names)

    @classmethod
    def single(cls, n_members):
        """All members exchangeable."""
        return cls((n_members,))

    @classmethod
    def singletons(cls, n_members):
        """All members distinguishable."""
        return cls((1,) * n_members)

    @property
    def n_groups(self):
        return len(self.group_sizes)

    @property
    def n_members(self):
        return sum(self.group_sizes)

    def group_sums(self, members):
        """Sum members group by group along the last axis."""
        members = np.asarray(members, dtype=float)
        if members.shape[-1] != self.n_members:
            raise ValueError(
                f"expected {self.n_members} members for grouping {self.group_sizes}, "
                f"got {members.shape[-1]}"
            )
        edges = np.cumsum((0,) + self.group_sizes)
        # sorting first makes the sums independent of member order within a group, bit for bit
        return np.stack(
            [np.sort(members[..., lo:hi], axis=-1).sum(axis=-1) for lo, hi in zip(edges[:-1], edges[1:])],
            axis=-1,
        )


@dataclass(frozen=True)
class ForecastCase:
    """Ensemble forecast and verifying observation for one date and station."""

    date: dt.date
    station_id: str
    members: tuple
    observation: Optional[float] = None

    def __post_init__(self):
        members = tuple(float(m) for m in self.members)
        if any(not np.isfinite(m) or m < 0 for m in members):
            raise ValueError(f"members must be finite and non-negative ({self.date}, {self.station_id})")
        object.__setattr__(self, "members", members)
        if self.observation is not None:
            obs = float(self.observation)
            if not np.isfinite(obs) or obs < 0:
                raise ValueError(f"observation must be non-negative ({self.date}, {self.station_id})")
            object.__setattr__(self, "observation", obs)

    @property
    def has_observation(self):
        return self.observation is not None


@dataclass(frozen=True)
class EnsembleStats:
    """Summary statistics entering the links; fields may be batched arrays."""

    group_sums: np.ndarray
    ensemble_mean: np.ndarray
    ensemble_variance: np.ndarray
    ensemble_median: np.ndarray


def ensemble_stats(case, grouping):
    """Statistics of one case, or of a sequence of cases stacked into arrays."""
    if isinstance(case, ForecastCase):
        members = np.asarray(case.members, dtype=float)
    else:
        members = np.asarray([c.members for c in case], dtype=float)
    return stats_from_members(members, grouping)


def stats_from_members(members, grouping):
    members = np.asarray(members, dtype=float)
    if members.shape[-1] < 2:
        raise ValueError("ensemble variance needs at least two members")
    sums = grouping.group_sums(members)
    ordered = np.sort(members, axis=-1)
    return EnsembleStats(
        group_sums=sums,
        ensemble_mean=ordered.mean(axis=-1),
        ensemble_variance=ordered.var(axis=-1, ddof=1),
        ensemble_median=np.median(ordered, axis=-1),
    )


@dataclass(frozen=True)
class CoefficientSet:
    """EMOS coefficients.

    ``tn`` holds ``(a_0, a_1, ..., a_m, b_0, b_1)`` and ``ln`` holds
    ``(alpha_0, ..., alpha_m, beta_0, beta_1)``; ``weight`` is the TN weight of
    the mixture and ``threshold`` the regime-switching median threshold.
    """

    kind: ModelKind
    tn: Optional[tuple] = None
    ln: Optional[tuple] = None
    weight: Optional[float] = None
    threshold: Optional[float] = None

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        for name in ("tn", "ln"):
            block = getattr(self, name)
            if block is None:
                continue
            block = tuple(float(v) for v in block)
            if len(block) < 4:
                raise ValueError(f"{name} block needs intercept, at least one slope and two variance terms")
            if block[-2] < 0 or block[-1] < 0:
                raise ValueError(f"{name} variance coefficients must be non-negative, got {block[-2:]}")
            object.__setattr__(self, name, block)
        needs_tn = kind in (ModelKind.TN, ModelKind.MIXTURE, ModelKind.REGIME_SWITCH)
        needs_ln = kind in (ModelKind.LN, ModelKind.MIXTURE, ModelKind.REGIME_SWITCH)
        if needs_tn and self.tn is None:
            raise ValueError(f"{kind.value} model requires TN coefficients")
        if needs_ln and self.ln is None:
            raise ValueError(f"{kind.value} model requires LN coefficients")
        if kind is ModelKind.MIXTURE:
            if self.weight is None or not 0.0 <= float(self.weight) <= 1.0:
                raise ValueError("MIXTURE model requires a weight in [0, 1]")
            object.__setattr__(self, "weight", float(self.weight))
        if kind is ModelKind.REGIME_SWITCH:
            if self.threshold is None or not float(self.threshold) > 0:
                raise ValueError("REGIME_SWITCH model requires a positive threshold")
            object.__setattr__(self, "threshold", float(self.threshold))


def _affine(block, stats):
    block = np.asarray(block)
    slopes = block[1:-2]
    if slopes.size != np.shape(stats.group_sums)[-1]:
        raise ValueError(f"{slopes.size} slopes supplied for {np.shape(stats.group_sums)[-1]} groups")
    center = block[0] + np.asarray(stats.group_sums) @ slopes
    spread = block[-2] + block[-1] * np.asarray(stats.ensemble_variance)
    return center, spread


def tn_parameters(block, stats):
    location, variance = _affine(block, stats)
    if np.any(variance <= 0):
        raise InfeasibleLinkError("TN variance b_0 + b_1 S^2 must be positive")
    return location, np.sqrt(variance)


def ln_parameters(block, stats):
    mean, variance = _affine(block, stats)
    if np.any(mean <= 0):
        raise InfeasibleLinkError("LN mean must be positive")
    if np.any(variance <= 0):
        raise InfeasibleLinkError("LN variance beta_0 + beta_1 S^2 must be positive")
    ratio = variance / mean**2
    return np.log(mean) - 0.5 * np.log1p(ratio), np.sqrt(np.log1p(ratio))


def link_tn(coeffs, stats):
    return TruncNormal(*tn_parameters(coeffs.tn, stats))


def link_ln(coeffs, stats):
    return LogNormal(*ln_parameters(coeffs.ln, stats))


def link_mixture(coeffs, stats):
    tn = link_tn(coeffs, stats)
    ln = link_ln(coeffs, stats)
    return MixtureTnLn(np.broadcast_to(coeffs.weight, tn.batch_shape), tn, ln)


def link_regime_switch(coeffs, stats):
    """TN when the ensemble median is below the threshold, LN otherwise.

    For a single case the selected component itself is returned. For a batch
    the result is a mixture whose weights are exactly 1 (TN) or 0 (LN), which
    every operation reduces to the selected component; the unused component
    of each case is not required to be feasible.
    """
    median = np.asarray(stats.ensemble_median)
    use_tn = median < coeffs.threshold
    if median.ndim == 0:
        return link_tn(coeffs, stats) if use_tn else link_ln(coeffs, stats)

    tn_loc, tn_var = _affine(coeffs.tn, stats)
    ln_mean, ln_var = _affine(coeffs.ln, stats)
    if np.any(tn_var[use_tn] <= 0):
        raise InfeasibleLinkError("TN variance b_0 + b_1 S^2 must be positive")
    if np.any(ln_mean[~use_tn] <= 0) or np.any(ln_var[~use_tn] <= 0):
        raise InfeasibleLinkError("LN mean and variance must be positive")
    # placeholders for the component that is never consulted
    tn_var = np.where(use_tn, tn_var, 1.0)
    ln_mean = np.where(use_tn, 1.0, ln_mean)
    ln_var = np.where(use_tn, 1.0, ln_var)
    ratio = ln_var / ln_mean**2
    tn = TruncNormal(tn_loc, np.sqrt(tn_var))
    ln = LogNormal(np.log(ln_mean) - 0.5 * np.log1p(ratio), np.sqrt(np.log1p(ratio)))
    return MixtureTnLn(use_tn.astype(float), tn, ln)


_LINKS = {
    ModelKind.TN: link_tn,
    ModelKind.LN: link_ln,
    ModelKind.MIXTURE: link_mixture,
    ModelKind.REGIME_SWITCH: link_regime_switch,
}


def link(coeffs, stats):
    """Predictive distribution(s) of the model described by ``coeffs``."""
    return _LINKS[coeffs.kind](coeffs, stats)


def empirical_forecast(values):
    """Step-function forecast from raw ensemble members or training observations."""
    return EmpiricalDistribution(values)


def distribution_at(dist, index):
    """Extract one forecast from a batched distribution."""
    return dist.take(index)
