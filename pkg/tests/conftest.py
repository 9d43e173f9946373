"""Shared test helpers.

The CRPS oracle integrates the squared CDF discrepancy with scipy's adaptive
QUADPACK routine. It shares no code with the package's own integrator.
"""

import sys

import numpy as np
import pytest
from scipy import integrate

from emosmix.distributions import TAIL_MASS


def quad_crps(cdf, quantile, obs, threshold=0.0, jumps=()):
    """Reference CRPS (or twCRPS above ``threshold``) of a scalar forecast.

    ``jumps`` lists discontinuities of the CDF; the integral is split there.
    """
    lo = max(threshold, 0.0)
    hi = max(float(quantile(1.0 - TAIL_MASS)), obs, lo) + 1.0
    kw = dict(epsabs=1e-13, epsrel=1e-12, limit=500)
    x = max(obs, lo)
    inner = [float(quantile(0.5))] + [float(j) for j in jumps]
    cuts = sorted({lo, x, hi} | {c for c in inner if lo < c < hi})
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (a + b)
        if mid < x:
            total += integrate.quad(lambda y: cdf(y) ** 2, a, b, **kw)[0]
        else:
            total += integrate.quad(lambda y: (1.0 - cdf(y)) ** 2, a, b, **kw)[0]
    return total


def quad_crps_dist(dist, obs, threshold=0.0):
    jumps = np.ravel(getattr(dist, "values", ()))
    return quad_crps(lambda y: float(dist.cdf(y)), lambda p: float(dist.quantile(p)), obs, threshold, jumps)


def monte_carlo_crps(draws, obs):
    """E|X - x| - E|X - X'|/2 from one sample, with a standard error.

    The second expectation uses disjoint pairs of draws so that both terms are
    plain means of independent quantities.
    """
    draws = np.asarray(draws, dtype=float)
    half = draws.size // 2
    first = np.abs(draws - obs)
    pairs = 0.5 * np.abs(draws[:half] - draws[half : 2 * half])
    term = first[:half] + first[half : 2 * half]
    combined = 0.5 * term - pairs
    return float(combined.mean()), float(combined.std(ddof=1) / np.sqrt(half))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def output_digest(root):
    """Map each file under ``root`` to its bytes, with run-specific manifest fields removed.

    Manifests record wall-clock timing and the input paths of the run; both
    legitimately differ between two otherwise identical runs.
    """
    import json
    from pathlib import Path

    out = {}
    for path in sorted(Path(root).rglob("*")):
        if not path.is_file():
            continue
        key = str(path.relative_to(root))
        if path.name == "manifest.json":
            manifest = json.loads(path.read_text())
            manifest.pop("timing")
            for item in manifest["inputs"]:
                item.pop("path")
            out[key] = json.dumps(manifest, sort_keys=True).encode()
        else:
            out[key] = path.read_bytes()
    return out


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
