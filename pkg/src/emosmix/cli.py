"""Command-line front end: ``emosmix simulate | calibrate | verify``.

Each stage reads the files written by the previous one, so several models can
be calibrated on one data set and compared in a single verification run.
Every run writes ``manifest.json`` next to its outputs.

Exit codes: 0 success, 1 invalid input, 2 runtime or convergence failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    CLIMATOLOGY,
    RunConfig,
    load_config,
    load_dataset,
    load_forecasts,
    save_coefficients,
    save_dataset,
    save_forecasts,
    write_report,
    write_table,
)
from .distributions import EmpiricalDistribution
from .errors import DataFormatError, EmosError, InfeasibleLinkError, InsufficientHistoryError
from .estimation import TrainingConfig, climatology_calibrate, rolling_calibrate
from .models import ModelKind
from .synthetic import ScenarioSpec, generate
from .verification import (
    build_report,
    bootstrap_rejection_rate,
    dm_test,
    score_cases,
    twcrpss,
)

log = logging.getLogger("emosmix")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

ENSEMBLE = "ENSEMBLE"


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# manifest


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (dt.date, Path)):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_manifest(out_dir, command, config, inputs, outputs, seed, started):
    """Record what ran, on which inputs, and which files it produced."""
    manifest = {
        "command": command,
        "software": {"package": "emosmix", "version": __version__},
        "seed": seed,
        "config": _jsonable(config),
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": [{"file": Path(p).name, "sha256": _sha256(p)} for p in outputs],
        "timing": {"elapsed_seconds": round(time.perf_counter() - started, 3)},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# shared helpers


def _resolve_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "model": getattr(args, "model", None),
        "objective": getattr(args, "objective", None),
        "window_days": getattr(args, "window", None),
        "threshold": getattr(args, "threshold", None),
        "seed": getattr(args, "seed", None),
        "pooling": getattr(args, "pooling", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "model" in overrides:
        overrides["model"] = overrides["model"].upper()
    return dataclasses.replace(config, **overrides)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path, config):
    cases, n_members = load_dataset(path)
    if not cases:
        raise DataFormatError(f"{path}: no data rows")
    config.check_members(n_members)
    return cases


# ---------------------------------------------------------------------------
# simulate


def _scenario(config):
    grouping = config.grouping()
    truth = config.truth()
    for name in ("truth_tn", "truth_ln"):
        block = getattr(truth, name[len("truth_"):])
        if block is not None and len(block) != grouping.n_groups + 3:
            raise DataFormatError(
                f"{name}: expected {grouping.n_groups + 3} coefficients for {grouping.n_groups} group(s), got {len(block)}"
            )
    try:
        return ScenarioSpec(
            n_days=config.n_days,
            n_stations=config.n_stations,
            grouping=grouping,
            truth=truth,
            seed=config.seed,
            start_date=dt.date.fromisoformat(config.start_date),
            base_level=config.base_level,
            level_step=config.level_step,
            level_bounds=tuple(config.level_bounds),
            station_spread=config.station_spread,
            member_spread=config.member_spread,
            spread_variability=config.spread_variability,
            group_bias=None if config.group_bias is None else tuple(config.group_bias),
        )
    except ValueError as exc:
        raise DataFormatError(f"scenario: {exc}") from None


def cmd_simulate(args):
    started = time.perf_counter()
    config = _resolve_config(args)
    spec = _scenario(config)
    out = _out_dir(args)
    cases = generate(spec)
    data_path = out / "dataset.csv"
    save_dataset(cases, data_path)
    log.info("wrote %d cases to %s", len(cases), data_path)
    write_manifest(out, "simulate", config, [args.config] if args.config else [], [data_path], config.seed, started)


# ---------------------------------------------------------------------------
# calibrate


def cmd_calibrate(args):
    started = time.perf_counter()
    config = _resolve_config(args)
    cases = _load_data(args.data, config)
    out = _out_dir(args)
    try:
        training = TrainingConfig(
            window_days=config.window_days,
            objective=config.objective,
            model_kind=ModelKind.TN if config.model == CLIMATOLOGY else config.model,
            pooling=config.pooling,
            threshold=config.threshold,
        )
    except ValueError as exc:
        raise DataFormatError(f"config: {exc}") from None

    outputs = []
    if config.model == CLIMATOLOGY:
        results = climatology_calibrate(cases, training)
    else:
        grouping = config.grouping()
        chain = not args.independent_dates
        results = rolling_calibrate(
            cases, grouping, training, chain_warm_starts=chain, threads=args.threads or os.cpu_count() or 1
        )
        coeff_path = out / "coefficients.csv"
        save_coefficients(results, grouping.n_groups, coeff_path)
        outputs.append(coeff_path)
        failed = [(d, k) for d, c in results.items() for k, r in c.fits.items() if not r.converged]
        for date, key in failed:
            log.warning("fit for %s%s stopped at the evaluation limit", date, "" if key is None else f" ({key})")

    forecast_path = out / "forecasts.csv"
    save_forecasts([pair for date in sorted(results) for pair in results[date].forecasts], forecast_path)
    outputs.append(forecast_path)
    log.info("calibrated %d dates with %s", len(results), config.model)
    write_manifest(
        out, "calibrate", config, [p for p in (args.config, args.data) if p], outputs, config.seed, started
    )


# ---------------------------------------------------------------------------
# verify


def _parse_forecast_arg(text):
    name, sep, path = text.partition("=")
    if not sep:
        path = text
        name = Path(text).parent.name or Path(text).stem
    if not name:
        raise DataFormatError(f"--forecasts {text!r}: empty model name")
    return name, Path(path)


def _aligned(name, path, keys):
    table = load_forecasts(path)
    missing = [k for k in keys if k not in table]
    if missing:
        d, s = missing[0]
        raise DataFormatError(f"{path}: no forecast for {d} {s} ({len(missing)} verified cases missing)")
    return [table[k] for k in keys]


def cmd_verify(args):
    started = time.perf_counter()
    config = _resolve_config(args)
    cases = _load_data(args.data, config)
    out = _out_dir(args)

    inputs = [_parse_forecast_arg(f) for f in args.forecasts or []]
    names = [n for n, _ in inputs]
    if len(set(names)) != len(names):
        raise DataFormatError(f"--forecasts: duplicate model names {names}")
    if not inputs and not args.ensemble:
        raise DataFormatError("--forecasts: nothing to verify")

    # the verified cases are those with an observation covered by the first forecast file
    first = load_forecasts(inputs[0][1]) if inputs else None
    observed = {(c.date, c.station_id): c for c in cases if c.has_observation}
    keys = sorted(observed if first is None else (k for k in first if k in observed))
    if not keys:
        raise DataFormatError(f"{args.data}: no observed cases match the forecasts")
    verified = [observed[k] for k in keys]
    obs = np.array([c.observation for c in verified])
    members = np.array([c.members for c in verified])

    forecasts = {name: _aligned(name, path, keys) for name, path in inputs}
    if args.ensemble:
        forecasts[ENSEMBLE] = EmpiricalDistribution(members)

    m = members.shape[1]
    nominal = config.nominal_coverage if config.nominal_coverage is not None else 100.0 * (m - 1) / (m + 1)
    if config.twcrps_thresholds is None:
        thresholds = [float(v) for v in np.percentile(obs, [90, 95, 99])]
    else:
        thresholds = [float(v) for v in config.twcrps_thresholds]
    n_bins = config.pit_bins or m + 1
    seeds = np.random.SeedSequence(config.seed).spawn(2 * len(forecasts))

    reports, outputs = [], []
    for i, (name, fc) in enumerate(forecasts.items()):
        rank_members = members if name == ENSEMBLE else None
        rng_seed = np.random.default_rng(seeds[2 * i])
        reports.append(
            build_report(name, fc, obs, nominal, thresholds, n_bins=n_bins, members=rank_members, seed=rng_seed)
        )
        log.info("scored %s on %d cases", name, len(keys))

    report_csv, report_json = out / "report.csv", out / "report.json"
    write_report(reports, report_csv, "CSV", thresholds)
    write_report(reports, report_json, "JSON", thresholds)
    outputs += [report_csv, report_json]

    for rep in reports:
        path = out / f"histogram_{rep.model}.csv"
        if rep.model == ENSEMBLE:
            write_table(path, ["rank", "count"], [(k + 1, c) for k, c in enumerate(rep.rank_counts)])
        else:
            edges = np.linspace(0.0, 1.0, n_bins + 1)
            rows = [(edges[k], edges[k + 1], c) for k, c in enumerate(rep.rank_counts)]
            write_table(path, ["lower", "upper", "count"], rows)
        outputs.append(path)

    # Diebold-Mariano matrix for each score
    h = config.forecast_horizon_days
    scores = {
        kind: {name: score_cases(fc, obs, kind) for name, fc in forecasts.items()} for kind in ("CRPS", "LOGS")
    }
    rows = []
    for kind, series in scores.items():
        for f in forecasts:
            for g in forecasts:
                if np.any(np.isnan(series[f].values)) or np.any(np.isnan(series[g].values)):
                    continue
                res = dm_test(series[f], series[g], h)
                rows.append((kind, f, g, res.statistic, res.p_value, res.n, res.excluded, res.inf_favor_f,
                             res.inf_favor_g, int(res.degenerate)))
    dm_path = out / "dm_tests.csv"
    write_table(dm_path, ["score", "model_f", "model_g", "statistic", "p_value", "n", "excluded",
                          "inf_favor_f", "inf_favor_g", "degenerate"], rows)
    outputs.append(dm_path)

    # uniformity-test rejection rates over random subsamples of the PIT values
    size = min(config.bootstrap_size, len(keys))
    rows = []
    for i, rep in enumerate(reports):
        if rep.model == ENSEMBLE:
            continue
        rate = bootstrap_rejection_rate(
            rep.pit_values, config.bootstrap_samples, size, seed=seeds[2 * i + 1], lag_truncation=h - 1
        )
        rows.append((rep.model, config.bootstrap_samples, size, rate))
    boot_path = out / "bootstrap_rejection.csv"
    write_table(boot_path, ["model", "n_samples", "sample_size", "rejection_rate"], rows)
    outputs.append(boot_path)

    reference = config.reference
    if reference in forecasts:
        grid = sorted(set(float(v) for v in np.percentile(obs, np.arange(50, 100, 2.5))) | set(thresholds))
        ref_tw = {r: score_cases(forecasts[reference], obs, "TWCRPS", r).mean() for r in grid}
        rows = []
        for name, fc in forecasts.items():
            for r in grid:
                mean_tw = ref_tw[r] if name == reference else score_cases(fc, obs, "TWCRPS", r).mean()
                rows.append((name, r, mean_tw, twcrpss(mean_tw, ref_tw[r])))
        skill_path = out / "twcrpss.csv"
        write_table(skill_path, ["model", "threshold", "mean_twcrps", "twcrpss"], rows)
        outputs.append(skill_path)
    else:
        log.warning("reference model %s not among the verified forecasts; skipping twCRPSS", reference)

    in_files = [p for p in (args.config, args.data) if p] + [p for _, p in inputs]
    write_manifest(out, "verify", config, in_files, outputs, config.seed, started)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="emosmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key = value configuration file")
        if data:
            p.add_argument("--data", required=True, help="dataset CSV")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="generate a synthetic data set with a known truth model")
    common(p, data=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="rolling-window EMOS calibration")
    common(p)
    p.add_argument("--model", help="TN, LN, MIXTURE, REGIME_SWITCH or CLIMATOLOGY")
    p.add_argument("--objective", help="MIN_CRPS or MAX_LIKELIHOOD")
    p.add_argument("--window", type=int, help="training window in days")
    p.add_argument("--threshold", type=float, help="regime-switching median threshold")
    p.add_argument("--pooling", help="REGIONAL or LOCAL")
    p.add_argument("--threads", type=int, help="worker threads with --independent-dates (default: all cores)")
    p.add_argument("--independent-dates", action="store_true",
                   help="fit each date from the default start instead of the previous date's fit")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("verify", help="score and test calibrated forecasts")
    common(p)
    p.add_argument("--forecasts", action="append", metavar="NAME=PATH",
                   help="forecast file written by calibrate (repeatable)")
    p.add_argument("--ensemble", action="store_true", help="also verify the raw ensemble")
    p.add_argument("--threads", type=int, help="accepted for interface symmetry; verification runs serially")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s"
    )
    try:
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise CliError("--threads must be at least 1")
        if getattr(args, "window", None) is not None and args.window < 2:
            raise CliError("--window must be at least 2")
        args.func(args)
    except CliError as exc:
        print(f"emosmix: error: {exc}", file=sys.stderr)
        return exc.code
    except (DataFormatError, InsufficientHistoryError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"emosmix: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EmosError, InfeasibleLinkError, FloatingPointError, ArithmeticError) as exc:
        print(f"emosmix: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"emosmix: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
