"""Forecast verification: proper scores, calibration diagnostics and tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr
from scipy.stats import chi2

from .distributions import EmpiricalDistribution, LogNormal, MixtureTnLn, TruncNormal

SCORE_KINDS = ("CRPS", "LOGS", "TWCRPS")


# ---------------------------------------------------------------------------
# forecast batches


def _to_mixture(d):
    if isinstance(d, MixtureTnLn):
        return d
    if isinstance(d, TruncNormal):
        return MixtureTnLn(1.0, d, LogNormal(0.0, 1.0))
    return MixtureTnLn(0.0, TruncNormal(0.0, 1.0), d)


def as_batch(forecasts):
    """Stack a list of single forecasts into one batched distribution.

    Already batched distributions are returned unchanged. Mixed TN/LN lists
    (regime switching) become degenerate-weight mixtures. Empirical forecasts
    of unequal sizes cannot be stacked and are returned as a list.
    """
    if not isinstance(forecasts, (list, tuple)):
        return forecasts
    if not forecasts:
        raise ValueError("no forecasts")
    if all(isinstance(d, EmpiricalDistribution) for d in forecasts):
        sizes = {d.values.shape for d in forecasts}
        if len(sizes) == 1:
            return EmpiricalDistribution(np.stack([d.values for d in forecasts]))
        return list(forecasts)
    if any(isinstance(d, EmpiricalDistribution) for d in forecasts):
        raise TypeError("cannot mix empirical and parametric forecasts in one batch")
    kinds = {type(d) for d in forecasts}
    if len(kinds) > 1:
        forecasts = [_to_mixture(d) for d in forecasts]
    return _stack(forecasts)


def _stack(forecasts):
    cls = type(forecasts[0])
    if cls is MixtureTnLn:
        return MixtureTnLn(
            np.array([d.weight for d in forecasts], dtype=float),
            _stack([d.tn for d in forecasts]),
            _stack([d.ln for d in forecasts]),
        )
    if cls is TruncNormal:
        return TruncNormal(np.array([d.location for d in forecasts]), np.array([d.scale for d in forecasts]))
    return LogNormal(np.array([d.location for d in forecasts]), np.array([d.shape for d in forecasts]))


def _apply(forecasts, method, *args):
    batch = as_batch(forecasts)
    if isinstance(batch, list):
        columns = [np.broadcast_to(a, (len(batch),)) for a in args]
        return np.array([getattr(d, method)(*(c[i] for c in columns)) for i, d in enumerate(batch)], dtype=float)
    return np.asarray(getattr(batch, method)(*args), dtype=float)


# ---------------------------------------------------------------------------
# scores


@dataclass
class ScoreSeries:
    """Per-case scores aligned with the forecast cases."""

    values: np.ndarray
    kind: str
    threshold: Optional[float] = None

    @property
    def nonfinite(self):
        return ~np.isfinite(self.values)

    @property
    def n_nonfinite(self):
        return int(np.sum(self.nonfinite))

    def mean(self):
        return float(np.mean(self.values))

    def __len__(self):
        return self.values.size


def score_cases(forecasts, observations, score_kind, threshold=None):
    """Per-case CRPS, logarithmic score or threshold-weighted CRPS."""
    kind = score_kind.upper()
    if kind not in SCORE_KINDS:
        raise ValueError(f"unknown score {score_kind!r}; expected one of {SCORE_KINDS}")
    obs = np.asarray(observations, dtype=float)
    if np.any(np.isnan(obs)):
        raise ValueError("missing observation in scored cases")
    if kind == "CRPS":
        values = _apply(forecasts, "crps", obs)
    elif kind == "LOGS":
        values = _apply(forecasts, "log_score", obs)
    else:
        if threshold is None:
            raise ValueError("twCRPS needs a threshold")
        values = _apply(forecasts, "twcrps", obs, float(threshold))
    return ScoreSeries(np.asarray(values, dtype=float).ravel(), kind, threshold)


def twcrpss(mean_tw_f, mean_tw_ref):
    """Skill of a forecast relative to a reference; positive is better."""
    if mean_tw_ref <= 0:
        raise ValueError("reference twCRPS must be positive")
    return 1.0 - mean_tw_f / mean_tw_ref


def point_scores(forecasts, observations):
    """MAE of predictive medians and RMSE of predictive means."""
    obs = np.asarray(observations, dtype=float)
    medians = _apply(forecasts, "median")
    means = _apply(forecasts, "mean")
    mae = float(np.mean(np.abs(medians - obs)))
    rmse = float(np.sqrt(np.mean((means - obs) ** 2)))
    return mae, rmse


def pit(forecast, obs):
    """Probability integral transform: the forecast CDF at the observation."""
    values = _apply(forecast, "cdf", np.asarray(obs, dtype=float))
    return float(values) if values.ndim == 0 else values


def verification_rank(ensemble_members, obs, seed=None):
    """Rank of ``obs`` among the members (1..M+1), ties broken at random."""
    return EmpiricalDistribution(ensemble_members).rank(obs, seed)


def histogram_counts(values, n_bins, lower=0.0, upper=1.0):
    """Counts over ``n_bins`` equal bins; the right edge is closed."""
    edges = np.linspace(lower, upper, n_bins + 1)
    counts, _ = np.histogram(np.clip(values, lower, upper), bins=edges)
    return counts


def rank_counts(ranks, n_members):
    ranks = np.asarray(ranks, dtype=int)
    return np.bincount(ranks - 1, minlength=n_members + 1)


def coverage_and_width(forecasts, observations, nominal_pct):
    """Coverage (%) and mean width of central prediction intervals."""
    if not 0 < nominal_pct < 100:
        raise ValueError("nominal coverage must lie strictly between 0 and 100")
    alpha = 1.0 - nominal_pct / 100.0
    obs = np.asarray(observations, dtype=float)
    lower = _apply(forecasts, "quantile", alpha / 2.0)
    upper = _apply(forecasts, "quantile", 1.0 - alpha / 2.0)
    inside = (lower <= obs) & (obs <= upper)
    return float(100.0 * np.mean(inside)), float(np.mean(upper - lower))


# ---------------------------------------------------------------------------
# Diebold-Mariano test


@dataclass(frozen=True)
class DmResult:
    """Diebold-Mariano test of equal predictive performance.

    Negative statistics favour the first forecast. Cases where only one
    forecast has an infinite score are not used in the statistic; they are
    counted in ``inf_favor_f`` / ``inf_favor_g`` instead.
    """

    statistic: float
    p_value: float
    lag: int
    n: int
    degenerate: bool = False
    excluded: int = 0
    inf_favor_f: int = 0
    inf_favor_g: int = 0


def autocovariances(x, max_lag):
    x = np.asarray(x, dtype=float)
    n = x.size
    c = x - x.mean()
    return np.array([np.dot(c[k:], c[: n - k]) / n for k in range(max_lag + 1)])


def dm_test(series_f, series_g, h=1):
    """DM statistic with autocovariances of the score differences up to lag ``h - 1``."""
    f = np.asarray(getattr(series_f, "values", series_f), dtype=float)
    g = np.asarray(getattr(series_g, "values", series_g), dtype=float)
    if f.shape != g.shape:
        raise ValueError("score series must have equal lengths")
    if h < 1:
        raise ValueError("forecast horizon h must be at least 1")
    finite_f, finite_g = np.isfinite(f), np.isfinite(g)
    use = finite_f & finite_g
    inf_favor_f = int(np.sum(finite_f & ~finite_g))
    inf_favor_g = int(np.sum(~finite_f & finite_g))
    d = f[use] - g[use]
    n = d.size
    if n < h or n < 2:
        raise ValueError(f"need at least max(h, 2) comparable cases, got {n}")
    mean = float(np.mean(d))
    gamma = autocovariances(d, h - 1)
    variance = gamma[0] + 2.0 * np.sum(gamma[1:])
    if variance <= 0:
        variance = gamma[0]
    # differences that vary only by rounding count as constant
    scale = max(float(np.max(np.abs(f[use]))), float(np.max(np.abs(g[use]))))
    if variance <= (16.0 * np.finfo(float).eps * scale) ** 2:
        variance = 0.0
    common = dict(lag=h, n=n, excluded=int(f.size - n), inf_favor_f=inf_favor_f, inf_favor_g=inf_favor_g)
    if variance <= 0:
        if mean == 0:
            return DmResult(0.0, 1.0, degenerate=True, **common)
        return DmResult(math.copysign(np.inf, mean), 0.0, degenerate=True, **common)
    t = math.sqrt(n) * mean / math.sqrt(variance)
    return DmResult(t, float(2.0 * ndtr(-abs(t))), **common)


# ---------------------------------------------------------------------------
# moment-based uniformity test

_NULL_MOMENTS = np.array([0.0, 1.0 / 12.0, 0.0, 1.0 / 80.0])


def _centered_uniform_moment(p):
    return 0.0 if p % 2 else 0.5**p / (p + 1)


_NULL_COV = np.array(
    [[_centered_uniform_moment(j + k) - _NULL_MOMENTS[j - 1] * _NULL_MOMENTS[k - 1] for k in range(1, 5)]
     for j in range(1, 5)]
)


@dataclass(frozen=True)
class UniformityResult:
    statistic: float
    p_value: float
    lag: int
    n: int


def _uniformity_statistics(samples, lag):
    """Wald statistics for a stack of PIT samples with shape ``(B, n)``."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[-1]
    y = samples - 0.5
    z = np.stack([y, y**2, y**3, y**4], axis=-1) - _NULL_MOMENTS  # (B, n, 4)
    zbar = z.mean(axis=1)
    cov = np.broadcast_to(_NULL_COV, zbar.shape[:1] + (4, 4)).copy()
    for k in range(1, lag + 1):
        gamma = np.einsum("bti,btj->bij", z[:, k:], z[:, : n - k]) / n
        cov += (1.0 - k / (lag + 1.0)) * (gamma + np.swapaxes(gamma, 1, 2))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular covariance estimate in uniformity test") from exc
    w = np.linalg.solve(chol, zbar[..., None])[..., 0]
    return n * np.sum(w * w, axis=-1)


def uniformity_test(pit_values, lag_truncation=0):
    """Four-moment test of PIT uniformity allowing for serial dependence.

    Compares the sample means of ``(u - 1/2)**k``, ``k = 1..4`` with their
    values under uniformity. The lag-0 covariance is the exact one for a
    uniform variable; autocovariances up to ``lag_truncation`` are estimated
    from the data with Bartlett weights. The statistic is referred to a
    chi-square law with 4 degrees of freedom.
    """
    u = np.asarray(pit_values, dtype=float)
    if u.size < 50:
        raise ValueError("uniformity test needs at least 50 PIT values")
    stat = float(_uniformity_statistics(u[None, :], int(lag_truncation))[0])
    return UniformityResult(stat, float(chi2.sf(stat, 4)), int(lag_truncation), u.size)


def bootstrap_rejection_rate(pit_values, n_samples=10_000, sample_size=2_500, level=0.05, seed=None,
                             lag_truncation=0, batch=250):
    """Fraction of random subsamples for which uniformity is rejected.

    Each subsample draws ``sample_size`` distinct PIT values (kept in their
    original order) from the pool.
    """
    u = np.asarray(pit_values, dtype=float)
    if u.size < sample_size:
        raise ValueError(f"need at least {sample_size} PIT values, got {u.size}")
    rng = np.random.default_rng(seed)
    critical = chi2.isf(level, 4)
    rejected = 0
    done = 0
    while done < n_samples:
        b = min(batch, n_samples - done)
        idx = np.sort(np.stack([rng.choice(u.size, sample_size, replace=False) for _ in range(b)]), axis=1)
        rejected += int(np.sum(_uniformity_statistics(u[idx], lag_truncation) > critical))
        done += b
    return rejected / n_samples


def series_correlation(series_a, series_b):
    """Pearson correlation of two equally long series."""
    a = np.asarray(series_a, dtype=float)
    b = np.asarray(series_b, dtype=float)
    if a.shape != b.shape or a.size < 3:
        raise ValueError("series must have equal lengths of at least 3")
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0:
        raise ValueError("correlation undefined for a constant series")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# report


@dataclass
class VerificationReport:
    model: str
    mean_crps: float
    mean_twcrps: dict
    mean_logs: float
    mae_median: float
    rmse_mean: float
    coverage_pct: float
    avg_width: float
    pit_values: list = field(default_factory=list)
    rank_counts: list = field(default_factory=list)
    n_cases: int = 0
    n_infinite_logs: int = 0


def build_report(model, forecasts, observations, nominal_pct, thresholds=(), n_bins=10, members=None, seed=None):
    """Aggregate scores for one forecast method.

    When ``members`` (raw ensemble values, shape ``(N, M)``) is given, the
    histogram holds verification ranks; otherwise it bins the PIT values.
    """
    obs = np.asarray(observations, dtype=float)
    crps = score_cases(forecasts, obs, "CRPS")
    logs = score_cases(forecasts, obs, "LOGS")
    tw = {float(r): score_cases(forecasts, obs, "TWCRPS", r).mean() for r in thresholds}
    mae, rmse = point_scores(forecasts, obs)
    coverage, width = coverage_and_width(forecasts, obs, nominal_pct)
    pits = np.asarray(_apply(forecasts, "cdf", obs), dtype=float).ravel()
    if members is not None:
        members = np.asarray(members, dtype=float)
        counts = rank_counts(verification_rank(members, obs, seed), members.shape[-1])
    else:
        counts = histogram_counts(pits, n_bins)
    return VerificationReport(
        model=model,
        mean_crps=crps.mean(),
        mean_twcrps=tw,
        mean_logs=float(np.mean(logs.values)) if not np.any(np.isnan(logs.values)) else math.nan,
        mae_median=mae,
        rmse_mean=rmse,
        coverage_pct=coverage,
        avg_width=width,
        pit_values=pits.tolist(),
        rank_counts=[int(c) for c in counts],
        n_cases=int(obs.size),
        n_infinite_logs=int(np.sum(np.isinf(logs.values))),
    )
