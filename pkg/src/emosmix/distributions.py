"""Predictive distributions for non-negative wind speed.

Every distribution is an immutable dataclass whose parameters may be scalars
or equally shaped arrays, so a single object can describe one forecast or a
whole batch of forecasts (one per training case). Methods broadcast their
argument against the parameter shape.

* :class:`TruncNormal` -- normal law cut off at zero.
* :class:`LogNormal` -- log-normal law with location/shape parameters.
* :class:`MixtureTnLn` -- weighted mixture ``w * TN + (1 - w) * LN``.
* :class:`EmpiricalDistribution` -- step CDF of a finite sample (raw ensemble,
  climatology).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Union

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

from ._quadrature import integrate_panels
from .errors import QuantileError

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)

#: Probability mass left outside the numerical integration range on either side.
TAIL_MASS = 1e-9
CRPS_TOL = 1e-8

# Initial quadrature breakpoints, as quantile levels of each component.
_LEVELS = np.array([TAIL_MASS, 0.02, 0.5, 0.98, 1 - TAIL_MASS])

# Below this location/scale ratio the TN normalizer is handled in log space.
_LOG_SPACE_RATIO = -5.0
# Below this location/scale ratio the TN closed-form CRPS cancels badly.
_TN_CLOSED_FORM_MIN_RATIO = -3.0


def _as_float(x):
    x = np.asarray(x, dtype=float)
    return x[()] if x.ndim == 0 else x


def _probability_levels(p):
    p = np.asarray(p, dtype=float)
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise ValueError("quantile levels must lie in [0, 1]")
    return p


class _Parametric:
    """Shared batching and numerical-CRPS machinery."""

    @property
    def batch_shape(self):
        shapes = []
        for f in self._param_fields():
            value = getattr(self, f.name)
            shapes.append(value.batch_shape if isinstance(value, _Parametric) else np.shape(value))
        return np.broadcast_shapes(*shapes)

    @classmethod
    def _param_fields(cls):
        return [f for f in fields(cls)]

    def _map_params(self, fn):
        kwargs = {}
        for f in self._param_fields():
            value = getattr(self, f.name)
            kwargs[f.name] = value._map_params(fn) if isinstance(value, _Parametric) else fn(value)
        return type(self)(**kwargs)

    def broadcast_to(self, shape):
        return self._map_params(lambda v: np.broadcast_to(v, shape))

    def take(self, index):
        """Select batch elements (for flattened batches)."""
        return self._map_params(lambda v: np.asarray(v)[index])

    def _expand(self):
        return self._map_params(lambda v: np.asarray(v)[..., None])

    def log_score(self, obs):
        """Negative log density at ``obs``; ``+inf`` outside the support."""
        return _as_float(-self.logpdf(obs))

    def median(self):
        return self.quantile(0.5)

    def twcrps(self, obs, threshold):
        """Threshold-weighted CRPS with weight ``1{y >= threshold}``."""
        return integrated_crps(self, obs, threshold)


@dataclass(frozen=True)
class TruncNormal(_Parametric):
    """Normal distribution with location ``location`` and scale ``scale``,
    truncated to ``[0, inf)``."""

    location: Union[float, np.ndarray]
    scale: Union[float, np.ndarray]

    def __post_init__(self):
        loc = _as_float(self.location)
        scale = _as_float(self.scale)
        if not np.all(np.isfinite(loc)):
            raise ValueError("TruncNormal location must be finite")
        if not np.all((scale > 0) & np.isfinite(scale)):
            raise ValueError("TruncNormal scale must be positive and finite")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "scale", scale)

    @property
    def _ratio(self):
        return self.location / self.scale

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.location) / self.scale
        logp = -0.5 * z * z - np.log(self.scale) - _LOG_SQRT_2PI - log_ndtr(self._ratio)
        return _as_float(np.where(x >= 0, logp, -np.inf))

    def pdf(self, x):
        return _as_float(np.exp(self.logpdf(x)))

    def cdf_sf(self, x):
        """Return ``(F(x), 1 - F(x))`` computed without cancellation."""
        x = np.asarray(x, dtype=float)
        a = self._ratio
        # x < 0 maps to z = -a, where both branches give F = 0 exactly
        z = (np.maximum(x, 0.0) - self.location) / self.scale
        if np.all(a > _LOG_SPACE_RATIO):
            mass = ndtr(a)
            tail = ndtr(-np.abs(z))
            sf_right = tail / mass
            cdf_left = (tail - ndtr(-a)) / mass
        else:
            log_mass = log_ndtr(a)
            log_tail = log_ndtr(-np.abs(z))
            sf_right = np.exp(log_tail - log_mass)
            # the left branch is only reached where a > 0, so the mass cannot underflow there
            with np.errstate(divide="ignore", invalid="ignore"):
                cdf_left = (np.exp(log_tail) - ndtr(-a)) / np.exp(log_mass)
        right = z > 0
        cdf = np.where(right, 1.0 - sf_right, cdf_left)
        sf = np.where(right, sf_right, 1.0 - cdf_left)
        return _as_float(cdf), _as_float(sf)

    def cdf(self, x):
        return self.cdf_sf(x)[0]

    def sf(self, x):
        return self.cdf_sf(x)[1]

    def quantile(self, p):
        p = _probability_levels(p)
        a = self._ratio
        lower_mass = ndtr(-a) + p * ndtr(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            from_left = ndtri(lower_mass)
            from_right = -ndtri_exp(np.log1p(-p) + log_ndtr(a))
        z = np.where(lower_mass < 0.5, from_left, from_right)
        return _as_float(np.maximum(self.location + self.scale * z, 0.0))

    def mean(self):
        a = self._ratio
        hazard = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - log_ndtr(a))
        return _as_float(self.location + self.scale * hazard)

    def variance(self):
        a = self._ratio
        hazard = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - log_ndtr(a))
        return _as_float(np.maximum(self.scale**2 * (1.0 - a * hazard - hazard**2), 0.0))

    def crps(self, obs):
        """CRPS in closed form (Thorarinsdottir & Gneiting, 2010).

        Falls back to quadrature for strongly negative location/scale
        ratios where the closed form suffers from cancellation.
        """
        obs = np.asarray(obs, dtype=float)
        mu, sigma = np.broadcast_arrays(self.location, self.scale)
        a = mu / sigma
        p = ndtr(a)
        z = (obs - mu) / sigma
        phi_z = np.exp(-0.5 * z * z - _LOG_SQRT_2PI)
        # p may underflow where a is very negative; those entries are replaced below
        with np.errstate(divide="ignore", invalid="ignore"):
            closed = sigma / p**2 * (
                z * p * (2.0 * ndtr(z) + p - 2.0)
                + 2.0 * phi_z * p
                - _INV_SQRT_PI * ndtr(math.sqrt(2.0) * a)
            )
        bad = np.broadcast_to(a < _TN_CLOSED_FORM_MIN_RATIO, closed.shape)
        if np.any(bad):
            closed = np.array(closed, copy=True)
            sub = self.broadcast_to(closed.shape).take(bad)
            closed[bad] = integrated_crps(sub, np.broadcast_to(obs, closed.shape)[bad])
        return _as_float(closed)

    def sample(self, seed, n):
        rng = np.random.default_rng(seed)
        u = rng.random((n,) + self.batch_shape)
        return self.quantile(u)

    def _breakpoints(self):
        return self._expand().quantile(_LEVELS)


@dataclass(frozen=True)
class LogNormal(_Parametric):
    """Log-normal distribution: ``log X ~ N(location, shape**2)``."""

    location: Union[float, np.ndarray]
    shape: Union[float, np.ndarray]

    def __post_init__(self):
        loc = _as_float(self.location)
        shape = _as_float(self.shape)
        if not np.all(np.isfinite(loc)):
            raise ValueError("LogNormal location must be finite")
        if not np.all((shape > 0) & np.isfinite(shape)):
            raise ValueError("LogNormal shape must be positive and finite")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_mean_variance(cls, mean, variance):
        """Build the log-normal law with the given mean and variance."""
        mean = np.asarray(mean, dtype=float)
        variance = np.asarray(variance, dtype=float)
        ratio = variance / mean**2
        return cls(np.log(mean) - 0.5 * np.log1p(ratio), np.sqrt(np.log1p(ratio)))

    def _z(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.log(np.where(x > 0, x, 0.0)) - self.location) / self.shape

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = self._z(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = -0.5 * z * z - np.log(x) - np.log(self.shape) - _LOG_SQRT_2PI
        return _as_float(np.where(x > 0, logp, -np.inf))

    def pdf(self, x):
        return _as_float(np.exp(self.logpdf(x)))

    def cdf_sf(self, x):
        z = self._z(np.asarray(x, dtype=float))
        tail = ndtr(-np.abs(z))
        right = z > 0
        return _as_float(np.where(right, 1.0 - tail, tail)), _as_float(np.where(right, tail, 1.0 - tail))

    def cdf(self, x):
        return _as_float(ndtr(self._z(np.asarray(x, dtype=float))))

    def sf(self, x):
        return _as_float(ndtr(-self._z(np.asarray(x, dtype=float))))

    def quantile(self, p):
        return _as_float(np.exp(self.location + self.shape * ndtri(_probability_levels(p))))

    def mean(self):
        return _as_float(np.exp(self.location + 0.5 * self.shape**2))

    def variance(self):
        s2 = self.shape**2
        return _as_float(np.expm1(s2) * np.exp(2.0 * self.location + s2))

    def crps(self, obs):
        """CRPS in closed form (Baran & Lerch, 2015)."""
        obs = np.asarray(obs, dtype=float)
        z = self._z(obs)
        mean = np.exp(self.location + 0.5 * self.shape**2)
        value = obs * (2.0 * ndtr(z) - 1.0) - 2.0 * mean * (
            ndtr(z - self.shape) + ndtr(self.shape / math.sqrt(2.0)) - 1.0
        )
        return _as_float(value)

    def sample(self, seed, n):
        rng = np.random.default_rng(seed)
        return np.exp(self.location + self.shape * rng.standard_normal((n,) + self.batch_shape))

    def _breakpoints(self):
        return self._expand().quantile(_LEVELS)


@dataclass(frozen=True)
class MixtureTnLn(_Parametric):
    """Mixture ``weight * TN + (1 - weight) * LN``.

    The weights 0 and 1 are valid and reduce every operation to the
    remaining component.
    """

    weight: Union[float, np.ndarray]
    tn: TruncNormal
    ln: LogNormal

    def __post_init__(self):
        w = _as_float(self.weight)
        if not np.all((w >= 0) & (w <= 1)):
            raise ValueError("mixture weight must lie in [0, 1]")
        object.__setattr__(self, "weight", w)

    def _blend(self, tn_value, ln_value):
        w = self.weight
        mixed = w * tn_value + (1.0 - w) * ln_value
        return _as_float(np.where(w == 1.0, tn_value, np.where(w == 0.0, ln_value, mixed)))

    def pdf(self, x):
        return self._blend(self.tn.pdf(x), self.ln.pdf(x))

    def logpdf(self, x):
        w = self.weight
        with np.errstate(divide="ignore"):
            return _as_float(np.logaddexp(np.log(w) + self.tn.logpdf(x), np.log1p(-w) + self.ln.logpdf(x)))

    def cdf_sf(self, x):
        f_tn, s_tn = self.tn.cdf_sf(x)
        f_ln, s_ln = self.ln.cdf_sf(x)
        return self._blend(f_tn, f_ln), self._blend(s_tn, s_ln)

    def cdf(self, x):
        return self.cdf_sf(x)[0]

    def sf(self, x):
        return self.cdf_sf(x)[1]

    def mean(self):
        return self._blend(self.tn.mean(), self.ln.mean())

    def variance(self):
        m_tn, m_ln = self.tn.mean(), self.ln.mean()
        second = self._blend(self.tn.variance() + m_tn**2, self.ln.variance() + m_ln**2)
        return _as_float(np.maximum(second - self.mean() ** 2, 0.0))

    def quantile(self, p, tol=1e-10, max_iter=200):
        """Quantile by bisection inside the component-quantile envelope."""
        p = _probability_levels(p)
        q_tn = np.asarray(self.tn.quantile(p))
        q_ln = np.asarray(self.ln.quantile(p))
        shape = np.broadcast_shapes(q_tn.shape, q_ln.shape, np.shape(self.weight))
        w = np.broadcast_to(self.weight, shape)
        q_tn = np.broadcast_to(q_tn, shape)
        q_ln = np.broadcast_to(q_ln, shape)
        lo = np.minimum(q_tn, q_ln).astype(float)
        hi = np.maximum(q_tn, q_ln).astype(float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise QuantileError("non-finite quantile bracket")
        flat = self.broadcast_to(shape)
        target = np.broadcast_to(p, shape)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            value = np.asarray(flat.cdf(mid))
            below = value < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all((hi - lo) <= 4 * np.finfo(float).eps * np.maximum(hi, 1e-300)):
                break
        else:
            raise QuantileError(f"mixture quantile did not converge in {max_iter} bisections")
        x = 0.5 * (lo + hi)
        x = np.where(w == 1.0, q_tn, np.where(w == 0.0, q_ln, x))
        return _as_float(x)

    def crps(self, obs):
        """CRPS; numerical integration of the split CDF integral for proper mixtures."""
        obs = np.asarray(obs, dtype=float)
        shape = np.broadcast_shapes(self.batch_shape, obs.shape)
        obs = np.broadcast_to(obs, shape)
        w = np.broadcast_to(self.weight, shape)
        out = np.empty(shape)
        only_tn = w == 1.0
        only_ln = w == 0.0
        mixed = ~(only_tn | only_ln)
        full = self.broadcast_to(shape)
        if np.any(only_tn):
            out[only_tn] = full.tn.take(only_tn).crps(obs[only_tn])
        if np.any(only_ln):
            out[only_ln] = full.ln.take(only_ln).crps(obs[only_ln])
        if np.any(mixed):
            out[mixed] = integrated_crps(full.take(mixed), obs[mixed])
        return _as_float(out)

    def sample(self, seed, n):
        rng = np.random.default_rng(seed)
        size = (n,) + self.batch_shape
        pick_tn = rng.random(size) < self.weight
        from_tn = self.tn.quantile(rng.random(size))
        from_ln = np.exp(self.ln.location + self.ln.shape * rng.standard_normal(size))
        return np.where(pick_tn, from_tn, from_ln)

    def _breakpoints(self):
        return np.concatenate([self.tn._breakpoints(), self.ln._breakpoints()], axis=-1)


def integrated_crps(dist, obs, threshold=None, tol=CRPS_TOL):
    """(Threshold-weighted) CRPS by adaptive quadrature of the split integral.

    Integrates ``F(y)**2`` below the observation and ``(1 - F(y))**2`` above
    it, over ``[max(0, threshold), U]`` where ``U`` is the largest component
    quantile at level ``1 - 1e-9`` (or the observation, if larger).
    """
    obs = np.asarray(obs, dtype=float)
    thr = np.zeros(()) if threshold is None else np.asarray(threshold, dtype=float)
    shape = np.broadcast_shapes(dist.batch_shape, obs.shape, thr.shape)
    n = int(np.prod(shape))
    if n == 0:
        return np.zeros(shape)
    flat = dist.broadcast_to(shape)._map_params(lambda v: np.ravel(v))
    x = np.broadcast_to(obs, shape).ravel()
    lo = np.maximum(np.broadcast_to(thr, shape).ravel(), 0.0)

    points = flat._breakpoints()
    hi = np.maximum(np.max(points, axis=1), np.maximum(x, lo))
    points = np.concatenate([points, x[:, None], lo[:, None], hi[:, None]], axis=1)
    points = np.clip(points, lo[:, None], hi[:, None])
    points.sort(axis=1)
    k = points.shape[1] - 1
    owner = np.repeat(np.arange(n), k)

    def integrand(y, own):
        d = flat.take(own)._expand()
        if isinstance(d, MixtureTnLn):
            # only proper mixtures get here from MixtureTnLn.crps; skip the degenerate-weight masks
            f_tn, s_tn = d.tn.cdf_sf(y)
            f_ln, s_ln = d.ln.cdf_sf(y)
            w = d.weight
            f = w * f_tn + (1.0 - w) * f_ln
            s = w * s_tn + (1.0 - w) * s_ln
        else:
            f, s = d.cdf_sf(y)
        return np.where(y < x[own][:, None], f * f, s * s)

    total, _ = integrate_panels(integrand, points[:, :-1].ravel(), points[:, 1:].ravel(), owner, n, tol)
    return _as_float(total.reshape(shape))


class EmpiricalDistribution:
    """Step CDF putting mass ``1/n`` on each value along the last axis.

    ``values`` may be 2-D (one sample per row) to describe a batch of
    forecasts that share a sample size, e.g. the raw ensemble.
    """

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 0 or values.shape[-1] == 0:
            raise ValueError("empirical distribution needs at least one value")
        self.values = np.sort(values, axis=-1)
        self.values.setflags(write=False)

    def __repr__(self):
        return f"EmpiricalDistribution(n={self.size}, batch_shape={self.batch_shape})"

    @property
    def size(self):
        return self.values.shape[-1]

    @property
    def batch_shape(self):
        return self.values.shape[:-1]

    def take(self, index):
        return EmpiricalDistribution(self.values[index])

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return _as_float(np.mean(self.values <= x[..., None], axis=-1))

    def quantile(self, p):
        """Order statistic ``ceil(n p)`` (1-based)."""
        p = _probability_levels(p)
        idx = np.clip(np.ceil(self.size * p).astype(int) - 1, 0, self.size - 1)
        if self.values.ndim == 1:
            return _as_float(self.values[idx])
        idx = np.broadcast_to(idx, self.batch_shape)
        return _as_float(np.take_along_axis(self.values, idx[..., None], axis=-1)[..., 0])

    def median(self):
        """Sample median; average of the two central values for even sizes."""
        return _as_float(np.median(self.values, axis=-1))

    def mean(self):
        return _as_float(np.mean(self.values, axis=-1))

    def variance(self):
        return _as_float(np.var(self.values, axis=-1))

    def pdf(self, x):
        raise TypeError("an empirical distribution has no density")

    def log_score(self, obs):
        """Undefined for a step CDF; returns NaN so aggregates can flag it."""
        return _as_float(np.full(np.broadcast_shapes(self.batch_shape, np.shape(obs)), np.nan))

    def crps(self, obs):
        """``E|X - x| - E|X - X'| / 2`` evaluated exactly on the sample."""
        obs = np.asarray(obs, dtype=float)
        v = self.values
        n = self.size
        abs_err = np.mean(np.abs(v - obs[..., None]), axis=-1)
        weights = 2.0 * np.arange(1, n + 1) - n - 1
        spread = 2.0 * np.sum(weights * v, axis=-1) / n**2
        return _as_float(abs_err - 0.5 * spread)

    def twcrps(self, obs, threshold):
        """Exact threshold-weighted CRPS of the step CDF."""
        obs = np.asarray(obs, dtype=float)
        thr = np.asarray(threshold, dtype=float)
        shape = np.broadcast_shapes(self.batch_shape, obs.shape, thr.shape)
        values = np.broadcast_to(self.values, shape + (self.size,)).reshape(-1, self.size)
        x = np.broadcast_to(obs, shape).ravel()
        r = np.broadcast_to(thr, shape).ravel()
        knots = np.concatenate([values, x[:, None], r[:, None]], axis=1)
        knots.sort(axis=1)
        # F is constant on [k_j, k_{j+1}); count values <= k_j row by row
        counts = np.empty_like(knots)
        for i in range(knots.shape[0]):
            counts[i] = np.searchsorted(values[i], knots[i], side="right")
        step = counts[:, :-1] / self.size
        indicator = (knots[:, :-1] >= x[:, None]).astype(float)
        left = np.maximum(knots[:, :-1], r[:, None])
        right = np.maximum(knots[:, 1:], r[:, None])
        total = np.sum((step - indicator) ** 2 * (right - left), axis=1)
        return _as_float(total.reshape(shape))

    def sample(self, seed, n):
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, self.size, size=(n,) + self.batch_shape)
        if self.values.ndim == 1:
            return self.values[idx]
        return np.take_along_axis(self.values[None, ...], idx[..., None], axis=-1)[..., 0]

    def rank(self, obs, seed=None):
        """Verification rank of ``obs`` among the values, ties randomized."""
        rng = np.random.default_rng(seed)
        obs = np.asarray(obs, dtype=float)
        below = np.sum(self.values < obs[..., None], axis=-1)
        ties = np.sum(self.values == obs[..., None], axis=-1)
        ranks = below + 1 + np.floor(rng.random(np.shape(below)) * (ties + 1)).astype(int)
        return ranks[()] if ranks.ndim == 0 else ranks


PredictiveDistribution = Union[TruncNormal, LogNormal, MixtureTnLn, EmpiricalDistribution]


def density(d, x):
    """PDF of ``d`` at ``x`` (zero outside the support)."""
    return d.pdf(x)


def cdf(d, x):
    return d.cdf(x)


def quantile(d, p):
    return d.quantile(p)


def crps(d, obs):
    """Continuous ranked probability score of ``d`` at ``obs``."""
    return d.crps(obs)


def twcrps(d, obs, threshold):
    return d.twcrps(obs, threshold)


def log_score(d, obs):
    return d.log_score(obs)


def sample(d, seed, n):
    """Draw ``n`` i.i.d. values; identical seeds give identical draws."""
    return d.sample(seed, n)
