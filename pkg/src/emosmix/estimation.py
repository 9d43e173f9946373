"""Optimum-score estimation of EMOS coefficients over rolling training windows.

Coefficients are fitted by minimizing the mean CRPS or the mean logarithmic
score (maximum likelihood) of the linked predictive distributions over the
training cases. The optimizer works on an unconstrained vector: variance
coefficients enter as squares and the mixture weight through a logistic
transform, so every candidate it evaluates is a valid coefficient set.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .errors import InfeasibleLinkError, InsufficientHistoryError
from .models import (
    CoefficientSet,
    EnsembleStats,
    ModelKind,
    empirical_forecast,
    ensemble_stats,
    link,
)

log = logging.getLogger(__name__)


class Objective(str, enum.Enum):
    MIN_CRPS = "MIN_CRPS"
    MAX_LIKELIHOOD = "MAX_LIKELIHOOD"


class Pooling(str, enum.Enum):
    REGIONAL = "REGIONAL"
    LOCAL = "LOCAL"


@dataclass(frozen=True)
class TrainingConfig:
    window_days: int
    objective: Objective = Objective.MIN_CRPS
    model_kind: ModelKind = ModelKind.TN
    pooling: Pooling = Pooling.REGIONAL
    threshold: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        if int(self.window_days) < 2:
            raise ValueError(f"window_days must be at least 2, got {self.window_days}")
        object.__setattr__(self, "window_days", int(self.window_days))
        if self.model_kind is ModelKind.REGIME_SWITCH:
            if self.threshold is None or not float(self.threshold) > 0:
                raise ValueError("REGIME_SWITCH requires a positive threshold")


@dataclass(frozen=True)
class FitResult:
    coefficients: CoefficientSet
    objective_value: float
    iterations: int
    converged: bool


class TrainingSet:
    """Ensemble statistics and observations of training cases, stacked once."""

    def __init__(self, cases, grouping):
        cases = list(cases)
        if not cases:
            raise ValueError("training set is empty")
        if any(not c.has_observation for c in cases):
            raise ValueError("training cases must all have observations")
        self.grouping = grouping
        self.stats = ensemble_stats(cases, grouping)
        self.obs = np.array([c.observation for c in cases], dtype=float)

    def __len__(self):
        return self.obs.size

    def subset(self, mask):
        """Training set restricted to the cases selected by a boolean mask."""
        out = object.__new__(TrainingSet)
        out.grouping = self.grouping
        out.stats = EnsembleStats(*(np.asarray(v)[mask] for v in dataclasses.astuple(self.stats)))
        out.obs = self.obs[mask]
        return out


def score(dist, obs, objective):
    if Objective(objective) is Objective.MIN_CRPS:
        return dist.crps(obs)
    return dist.log_score(obs)


def evaluate_objective(coeffs, training, objective):
    """Mean score over a :class:`TrainingSet`; ``+inf`` for infeasible links."""
    try:
        dist = link(coeffs, training.stats)
    except InfeasibleLinkError:
        return np.inf
    value = float(np.mean(score(dist, training.obs, objective)))
    return value if np.isfinite(value) else np.inf


def mean_objective(coeffs, cases, grouping, objective):
    """Mean CRPS or mean log score of ``coeffs`` over ``cases``."""
    return evaluate_objective(coeffs, TrainingSet(cases, grouping), objective)


def default_coefficients(kind, grouping, threshold=None):
    """Neutral start: location (or LN mean) equal to the ensemble mean, unit variance terms, weight 1/2."""
    kind = ModelKind(kind)
    block = (0.0,) + (1.0 / grouping.n_members,) * grouping.n_groups + (1.0, 1.0)
    has_tn = kind is not ModelKind.LN
    has_ln = kind is not ModelKind.TN
    return CoefficientSet(
        kind,
        tn=block if has_tn else None,
        ln=block if has_ln else None,
        weight=0.5 if kind is ModelKind.MIXTURE else None,
        threshold=threshold if kind is ModelKind.REGIME_SWITCH else None,
    )


class _Codec:
    """Map coefficient sets to unconstrained optimizer vectors and back."""

    def __init__(self, kind, n_groups, threshold=None):
        self.kind = ModelKind(kind)
        self.n_groups = n_groups
        self.threshold = threshold
        self.block = n_groups + 3

    def _encode_block(self, block):
        block = np.asarray(block, dtype=float)
        return np.concatenate([block[:-2], np.sqrt(block[-2:])])

    def _decode_block(self, theta):
        return tuple(theta[:-2]) + tuple(theta[-2:] ** 2)

    def encode(self, coeffs):
        parts = []
        if coeffs.kind is not ModelKind.LN:
            parts.append(self._encode_block(coeffs.tn))
        if coeffs.kind is not ModelKind.TN:
            parts.append(self._encode_block(coeffs.ln))
        if coeffs.kind is ModelKind.MIXTURE:
            parts.append([logit(np.clip(coeffs.weight, 1e-6, 1 - 1e-6))])
        return np.concatenate(parts)

    def decode(self, theta):
        theta = np.asarray(theta, dtype=float)
        k = self.block
        if self.kind is ModelKind.TN:
            return CoefficientSet(self.kind, tn=self._decode_block(theta))
        if self.kind is ModelKind.LN:
            return CoefficientSet(self.kind, ln=self._decode_block(theta))
        tn, ln = self._decode_block(theta[:k]), self._decode_block(theta[k:2 * k])
        if self.kind is ModelKind.MIXTURE:
            return CoefficientSet(self.kind, tn=tn, ln=ln, weight=float(expit(theta[2 * k])))
        return CoefficientSet(self.kind, tn=tn, ln=ln, threshold=self.threshold)

    def steps(self, theta, training):
        """Initial simplex edge lengths, scaled to the training data."""
        k = self.block
        sums = np.abs(np.mean(training.stats.group_sums, axis=0))
        steps = []
        n_blocks = 1 if self.kind in (ModelKind.TN, ModelKind.LN) else 2
        for b in range(n_blocks):
            block = theta[b * k:(b + 1) * k]
            steps.append(0.5)
            for slope, scale in zip(block[1:-2], sums):
                steps.append(0.1 * abs(slope) if slope != 0 else 0.1 / max(scale, 1.0))
            steps.extend(np.maximum(0.1 * np.abs(block[-2:]), 0.05))
        if self.kind is ModelKind.MIXTURE:
            steps.append(0.5)
        return np.array(steps)


def _nelder_mead(fun, theta0, steps, max_evals, fatol):
    dim = theta0.size
    simplex = np.vstack([theta0] + [theta0 + steps[i] * np.eye(dim)[i] for i in range(dim)])
    options = {
        "initial_simplex": simplex,
        "maxfev": max_evals,
        "fatol": fatol,
        "xatol": np.inf,
        "adaptive": dim > 4,
    }
    # infeasible vertices score +inf; scipy's spread check then sees inf - inf
    with np.errstate(invalid="ignore"):
        res = minimize(fun, theta0, method="Nelder-Mead", options=options)
    return res.x, float(res.fun), int(res.nit), bool(res.success)


def fit(cases, grouping, config, warm_start=None, *, training=None, fatol=1e-6):
    """Fit EMOS coefficients on the training cases.

    The returned objective never exceeds the objective at ``warm_start`` or at
    :func:`default_coefficients`. Without a warm start, the mixture is started
    from separately fitted TN and LN components, and the pure components
    (weights 1 and 0) are kept as candidates since the logistic weight cannot
    reach them.
    """
    if training is None:
        training = TrainingSet(cases, grouping)
    kind = config.model_kind
    if kind is ModelKind.REGIME_SWITCH:
        return _fit_regime_switch(training, config, warm_start, fatol)

    codec = _Codec(kind, grouping.n_groups, config.threshold)
    objective = config.objective

    def fun(theta):
        return evaluate_objective(codec.decode(theta), training, objective)

    default = default_coefficients(kind, grouping, config.threshold)
    candidates = [default] if warm_start is None else [warm_start, default]
    max_evals = 500 * codec.encode(default).size
    iterations = 0

    if kind is ModelKind.MIXTURE and warm_start is None:
        tn_fit = fit(None, grouping, _replace_kind(config, ModelKind.TN), training=training, fatol=fatol)
        ln_fit = fit(None, grouping, _replace_kind(config, ModelKind.LN), training=training, fatol=fatol)
        iterations += tn_fit.iterations + ln_fit.iterations
        tn, ln = tn_fit.coefficients.tn, ln_fit.coefficients.ln
        starts = [CoefficientSet(kind, tn=tn, ln=ln, weight=0.5)]
        candidates += [
            CoefficientSet(kind, tn=tn, ln=ln, weight=1.0),
            CoefficientSet(kind, tn=tn, ln=ln, weight=0.0),
        ]
    else:
        starts = [candidates[0]]

    converged = False
    for attempt, start in enumerate(starts):
        theta0 = codec.encode(start)
        theta, value, nit, converged = _nelder_mead(fun, theta0, codec.steps(theta0, training), max_evals, fatol)
        iterations += nit
        candidates.append(codec.decode(theta))
        if converged or warm_start is None or attempt > 0:
            continue
        log.debug("warm-started fit stalled after %d iterations; restarting from default", nit)
        starts.append(default)

    values = [evaluate_objective(c, training, objective) for c in candidates]
    best = int(np.argmin(values))
    return FitResult(candidates[best], values[best], iterations, converged)


def _replace_kind(config, kind):
    return TrainingConfig(config.window_days, config.objective, kind, config.pooling, config.threshold)


def _fit_regime_switch(training, config, warm_start, fatol):
    # The objective is a sum over the two regimes, so each branch is fitted on
    # the cases it serves. A branch with too few cases is fitted on the whole
    # window instead, which only matters for forecasts outside the window.
    grouping = training.grouping
    use_tn = np.asarray(training.stats.ensemble_median) < config.threshold
    min_cases = grouping.n_groups + 3
    results = []
    for kind, mask in ((ModelKind.TN, use_tn), (ModelKind.LN, ~use_tn)):
        warm = None
        if warm_start is not None:
            block = warm_start.tn if kind is ModelKind.TN else warm_start.ln
            warm = CoefficientSet(kind, tn=block if kind is ModelKind.TN else None, ln=block if kind is ModelKind.LN else None)
        subset = training.subset(mask) if np.sum(mask) >= min_cases else training
        results.append(fit(None, grouping, _replace_kind(config, kind), warm, training=subset, fatol=fatol))
    tn_fit, ln_fit = results
    combined = CoefficientSet(
        ModelKind.REGIME_SWITCH, tn=tn_fit.coefficients.tn, ln=ln_fit.coefficients.ln, threshold=config.threshold
    )
    candidates = [combined, default_coefficients(ModelKind.REGIME_SWITCH, grouping, config.threshold)]
    if warm_start is not None:
        candidates.append(warm_start)
    values = [evaluate_objective(c, training, config.objective) for c in candidates]
    best = int(np.argmin(values))
    return FitResult(
        candidates[best],
        values[best],
        tn_fit.iterations + ln_fit.iterations,
        tn_fit.converged and ln_fit.converged,
    )


@dataclass
class DateCalibration:
    """Fitted coefficients and per-case forecasts for one verification date.

    ``fits`` is keyed by station id for local pooling and by ``None`` for
    regional pooling.
    """

    date: dt.date
    fits: dict = field(default_factory=dict)
    forecasts: list = field(default_factory=list)


@dataclass
class DateClimatology:
    date: dt.date
    climatology: dict = field(default_factory=dict)
    forecasts: list = field(default_factory=list)


class _Windows:
    """Index a date-sorted dataset by calendar day."""

    def __init__(self, dataset, window_days):
        self.by_date = defaultdict(list)
        for case in dataset:
            self.by_date[case.date].append(case)
        if not self.by_date:
            raise InsufficientHistoryError("dataset is empty")
        self.dates = sorted(self.by_date)
        self.window_days = window_days

    def verification_dates(self, dates=None):
        first = self.dates[0] + dt.timedelta(days=self.window_days)
        if dates is None:
            chosen = [d for d in self.dates if d >= first]
            if not chosen:
                raise InsufficientHistoryError(
                    f"need more than {self.window_days} days of history; data span "
                    f"{self.dates[0]} to {self.dates[-1]}"
                )
            return chosen
        for d in dates:
            if d < first:
                raise InsufficientHistoryError(f"{d}: fewer than {self.window_days} days of history")
        return sorted(dates)

    def training(self, date, station=None):
        cases = []
        for lag in range(self.window_days, 0, -1):
            for case in self.by_date.get(date - dt.timedelta(days=lag), ()):
                if case.has_observation and (station is None or case.station_id == station):
                    cases.append(case)
        if not cases:
            where = f" at station {station}" if station is not None else ""
            raise InsufficientHistoryError(f"{date}: no observed training cases{where} in the preceding {self.window_days} days")
        return cases


def _pool_keys(cases, pooling):
    if pooling is Pooling.REGIONAL:
        return {None: list(cases)}
    keyed = defaultdict(list)
    for case in cases:
        keyed[case.station_id].append(case)
    return dict(keyed)


def rolling_calibrate(dataset, grouping, config, dates=None, *, chain_warm_starts=True, threads=1):
    """Fit on the ``window_days`` calendar days before each verification date.

    Returns a dict mapping each verification date to a :class:`DateCalibration`.
    With ``chain_warm_starts`` each fit starts from the previous date's
    coefficients; otherwise dates are independent and fitted on ``threads``
    worker threads.
    """
    windows = _Windows(dataset, config.window_days)
    targets = windows.verification_dates(dates)

    def calibrate(date, previous):
        calib = DateCalibration(date)
        for key, cases in _pool_keys(windows.by_date.get(date, ()), config.pooling).items():
            result = fit(windows.training(date, key), grouping, config, warm_start=previous.get(key))
            calib.fits[key] = result
            dist = link(result.coefficients, ensemble_stats(cases, grouping))
            calib.forecasts.extend((case, dist.take(i)) for i, case in enumerate(cases))
        return calib

    out = {}
    if chain_warm_starts:
        previous = {}
        for date in targets:
            calib = calibrate(date, previous)
            previous.update({k: r.coefficients for k, r in calib.fits.items()})
            out[date] = calib
            log.info("calibrated %s (%d forecasts)", date, len(calib.forecasts))
        return out

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for calib in pool.map(lambda d: calibrate(d, {}), targets):
            out[calib.date] = calib
    return out


def climatology_calibrate(dataset, config, dates=None):
    """Empirical distribution of the training-window observations per date."""
    windows = _Windows(dataset, config.window_days)
    out = {}
    for date in windows.verification_dates(dates):
        clim = DateClimatology(date)
        for key, cases in _pool_keys(windows.by_date.get(date, ()), config.pooling).items():
            values = [c.observation for c in windows.training(date, key)]
            dist = empirical_forecast(values)
            clim.climatology[key] = dist
            clim.forecasts.extend((case, dist) for case in cases)
        out[date] = clim
    return out
