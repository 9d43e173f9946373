"""File formats: datasets, run configuration, forecasts, coefficients, reports.

All CSV files are UTF-8 with LF line endings and a dot decimal separator.
Data values are written with ``repr`` so that reading a file back gives the
same floats bit for bit; report tables use three decimals.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .distributions import EmpiricalDistribution, LogNormal, MixtureTnLn, TruncNormal
from .errors import DataFormatError
from .models import CoefficientSet, ExchangeableGrouping, ForecastCase, ModelKind

# ---------------------------------------------------------------------------
# datasets

DATASET_FIXED_COLUMNS = ("date", "station_id", "observation")


def _fmt(x):
    return repr(float(x))


def load_dataset(path):
    """Read a dataset CSV.

    Returns ``(cases, n_members)`` with cases sorted by (date, station).
    Rows with an empty observation cell become cases without observation.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if tuple(header[:3]) != DATASET_FIXED_COLUMNS or len(header) < 5:
            raise DataFormatError(
                f"{path}: header must start with {','.join(DATASET_FIXED_COLUMNS)} followed by member columns"
            )
        n_members = len(header) - 3
        cases = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                date = dt.date.fromisoformat(row[0])
                obs = float(row[2]) if row[2].strip() else None
                members = tuple(float(v) for v in row[3:])
                cases.append(ForecastCase(date, row[1], members, obs))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    cases.sort(key=lambda c: (c.date, c.station_id))
    return cases, n_members


def save_dataset(cases, path):
    cases = sorted(cases, key=lambda c: (c.date, c.station_id))
    n_members = len(cases[0].members) if cases else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(DATASET_FIXED_COLUMNS) + [f"member_{i + 1}" for i in range(n_members)])
        for c in cases:
            obs = "" if c.observation is None else _fmt(c.observation)
            writer.writerow([c.date.isoformat(), c.station_id, obs] + [_fmt(m) for m in c.members])


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Declarative run configuration read from a flat ``key = value`` file."""

    groups: list = field(default_factory=list)
    model: str = "TN"
    objective: str = "MIN_CRPS"
    window_days: int = 20
    threshold: Optional[float] = None
    pooling: str = "REGIONAL"
    seed: int = 0
    nominal_coverage: Optional[float] = None
    twcrps_thresholds: Optional[list] = None
    forecast_horizon_days: int = 1
    pit_bins: Optional[int] = None
    bootstrap_samples: int = 10_000
    bootstrap_size: int = 2_500
    reference: str = "TN"
    # simulation
    n_days: int = 365
    n_stations: int = 10
    start_date: str = "2010-01-01"
    truth_model: str = "TN"
    truth_tn: Optional[list] = None
    truth_ln: Optional[list] = None
    truth_weight: Optional[float] = None
    truth_threshold: Optional[float] = None
    base_level: float = 6.0
    level_step: float = 1.0
    level_bounds: list = field(default_factory=lambda: [1.0, 15.0])
    station_spread: float = 1.0
    member_spread: float = 1.0
    spread_variability: float = 0.5
    group_bias: Optional[list] = None

    def grouping(self):
        if not self.groups:
            raise DataFormatError("groups: at least one group is required")
        names, sizes = zip(*self.groups)
        try:
            return ExchangeableGrouping(sizes, names)
        except ValueError as exc:
            raise DataFormatError(f"groups: {exc}") from None

    def truth(self):
        try:
            return CoefficientSet(
                self.truth_model,
                tn=self.truth_tn,
                ln=self.truth_ln,
                weight=self.truth_weight,
                threshold=self.truth_threshold,
            )
        except ValueError as exc:
            raise DataFormatError(f"truth_model: {exc}") from None

    def check_members(self, n_members):
        total = self.grouping().n_members
        if total != n_members:
            raise DataFormatError(f"groups: sizes sum to {total} but the data have {n_members} members")


CLIMATOLOGY = "CLIMATOLOGY"


def _parse_model(text):
    text = text.strip().upper()
    return CLIMATOLOGY if text == CLIMATOLOGY else ModelKind(text).value


def _parse_list(text, conv=float):
    return [conv(v.strip()) for v in text.split(",") if v.strip()]


def _parse_groups(text):
    groups = []
    for item in text.split(","):
        name, _, size = item.strip().rpartition(":")
        if not name:
            raise ValueError(f"group entry {item.strip()!r} must look like name:size")
        groups.append((name.strip(), int(size)))
    return groups


_PARSERS = {
    "groups": _parse_groups,
    "model": lambda s: _parse_model(s),
    "objective": lambda s: s.upper(),
    "window_days": int,
    "threshold": float,
    "pooling": lambda s: s.upper(),
    "seed": int,
    "nominal_coverage": float,
    "twcrps_thresholds": lambda s: None if s.lower() == "auto" else _parse_list(s),
    "forecast_horizon_days": int,
    "pit_bins": int,
    "bootstrap_samples": int,
    "bootstrap_size": int,
    "reference": str,
    "n_days": int,
    "n_stations": int,
    "start_date": lambda s: dt.date.fromisoformat(s).isoformat(),
    "truth_model": lambda s: ModelKind(s.upper()).value,
    "truth_tn": _parse_list,
    "truth_ln": _parse_list,
    "truth_weight": float,
    "truth_threshold": float,
    "base_level": float,
    "level_step": float,
    "level_bounds": _parse_list,
    "station_spread": float,
    "member_spread": float,
    "spread_variability": float,
    "group_bias": _parse_list,
}


def parse_config(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise DataFormatError(f"{source}:{lineno}: expected 'key = value'")
        if key not in _PARSERS:
            raise DataFormatError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise DataFormatError(f"{source}:{lineno}: invalid value for {key}: {exc}") from None
    config = RunConfig(**values)
    if config.twcrps_thresholds is not None and any(r <= 0 for r in config.twcrps_thresholds):
        raise DataFormatError(f"{source}: twcrps_thresholds must be positive")
    return config


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def config_to_dict(config):
    return asdict(config)


# ---------------------------------------------------------------------------
# forecasts and coefficients

FORECAST_COLUMNS = (
    "date", "station_id", "family", "tn_location", "tn_scale", "ln_location", "ln_shape", "weight", "values",
)


def _forecast_row(case, dist):
    row = {"date": case.date.isoformat(), "station_id": case.station_id}
    empty = dict.fromkeys(FORECAST_COLUMNS[2:], "")
    row.update(empty)
    if isinstance(dist, EmpiricalDistribution):
        row.update(family="EMPIRICAL", values=";".join(_fmt(v) for v in dist.values))
    elif isinstance(dist, TruncNormal):
        row.update(family="TN", tn_location=_fmt(dist.location), tn_scale=_fmt(dist.scale))
    elif isinstance(dist, LogNormal):
        row.update(family="LN", ln_location=_fmt(dist.location), ln_shape=_fmt(dist.shape))
    elif isinstance(dist, MixtureTnLn):
        w = float(dist.weight)
        # regime-switching forecasts are degenerate mixtures; store the selected family only
        if w == 1.0:
            return _forecast_row(case, dist.tn)
        if w == 0.0:
            return _forecast_row(case, dist.ln)
        row.update(
            family="MIXTURE",
            tn_location=_fmt(dist.tn.location), tn_scale=_fmt(dist.tn.scale),
            ln_location=_fmt(dist.ln.location), ln_shape=_fmt(dist.ln.shape),
            weight=_fmt(w),
        )
    else:
        raise TypeError(f"cannot serialise {type(dist).__name__}")
    return row


def save_forecasts(forecasts, path):
    """Write ``(case, distribution)`` pairs, one row per case."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=FORECAST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for case, dist in forecasts:
            writer.writerow(_forecast_row(case, dist))


def _parse_forecast(row):
    family = row["family"]
    if family == "TN":
        return TruncNormal(float(row["tn_location"]), float(row["tn_scale"]))
    if family == "LN":
        return LogNormal(float(row["ln_location"]), float(row["ln_shape"]))
    if family == "MIXTURE":
        return MixtureTnLn(
            float(row["weight"]),
            TruncNormal(float(row["tn_location"]), float(row["tn_scale"])),
            LogNormal(float(row["ln_location"]), float(row["ln_shape"])),
        )
    if family == "EMPIRICAL":
        return EmpiricalDistribution([float(v) for v in row["values"].split(";")])
    raise ValueError(f"unknown family {family!r}")


def load_forecasts(path):
    """Read a forecast file into a dict keyed by ``(date, station_id)``."""
    path = Path(path)
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FORECAST_COLUMNS:
            raise DataFormatError(f"{path}: unexpected forecast header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (dt.date.fromisoformat(row["date"]), row["station_id"])
                out[key] = _parse_forecast(row)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def coefficient_columns(n_groups):
    tn = [f"a_{k}" for k in range(n_groups + 1)] + ["b_0", "b_1"]
    ln = [f"alpha_{k}" for k in range(n_groups + 1)] + ["beta_0", "beta_1"]
    return ["date", "station_id", "kind"] + tn + ln + ["weight", "threshold", "objective", "iterations", "converged"]


def save_coefficients(calibrations, n_groups, path):
    """Write one row per (date, pool) fit of a rolling calibration."""
    columns = coefficient_columns(n_groups)
    width = n_groups + 3
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for date in sorted(calibrations):
            calib = calibrations[date]
            for key in sorted(calib.fits, key=lambda k: "" if k is None else k):
                result = calib.fits[key]
                c = result.coefficients
                tn = [_fmt(v) for v in c.tn] if c.tn is not None else [""] * width
                ln = [_fmt(v) for v in c.ln] if c.ln is not None else [""] * width
                writer.writerow(
                    [date.isoformat(), "*" if key is None else key, c.kind.value] + tn + ln + [
                        "" if c.weight is None else _fmt(c.weight),
                        "" if c.threshold is None else _fmt(c.threshold),
                        _fmt(result.objective_value),
                        str(result.iterations),
                        "1" if result.converged else "0",
                    ]
                )


def load_coefficients(path):
    """Read a coefficient file into a list of ``(date, station_or_None, CoefficientSet)``."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        names = reader.fieldnames or []
        n_groups = sum(1 for n in names if n.startswith("a_")) - 1
        for row in reader:
            def block(prefix, var):
                cells = [row[f"{prefix}_{k}"] for k in range(n_groups + 1)] + [row[f"{var}_0"], row[f"{var}_1"]]
                return None if not cells[0] else tuple(float(v) for v in cells)
            coeffs = CoefficientSet(
                row["kind"],
                tn=block("a", "b"),
                ln=block("alpha", "beta"),
                weight=float(row["weight"]) if row["weight"] else None,
                threshold=float(row["threshold"]) if row["threshold"] else None,
            )
            station = None if row["station_id"] == "*" else row["station_id"]
            out.append((dt.date.fromisoformat(row["date"]), station, coeffs))
    return out


# ---------------------------------------------------------------------------
# reports


def _r3(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.3f}"


def report_columns(thresholds):
    return (
        ["model", "CRPS"]
        + [f"twCRPS@{r:g}" for r in thresholds]
        + ["MAE", "RMSE", "coverage", "avg_width", "LogS", "n_cases"]
    )


def write_report(reports, path, fmt="CSV", thresholds=None):
    """Write verification reports as a CSV table or a JSON document.

    The CSV follows the table layout CRPS, twCRPS per threshold, MAE, RMSE,
    coverage, average width (plus LogS and the case count); values have three
    decimals. JSON keeps full precision and all fields.
    """
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    if thresholds is None:
        thresholds = sorted({r for rep in reports for r in rep.mean_twcrps})
    fmt = fmt.upper()
    path = Path(path)
    if fmt == "JSON":
        payload = {"thresholds": list(thresholds), "reports": [asdict(r) for r in reports]}
        for rep in payload["reports"]:
            rep["mean_twcrps"] = {repr(float(k)): v for k, v in rep["mean_twcrps"].items()}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
        return
    if fmt != "CSV":
        raise ValueError(f"unknown report format {fmt!r}")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(report_columns(thresholds))
        for rep in reports:
            writer.writerow(
                [rep.model, _r3(rep.mean_crps)]
                + [_r3(rep.mean_twcrps.get(r)) for r in thresholds]
                + [_r3(rep.mae_median), _r3(rep.rmse_mean), f"{rep.coverage_pct:.2f}", _r3(rep.avg_width),
                   _r3(rep.mean_logs), str(rep.n_cases)]
            )


def read_report_json(path):
    from .verification import VerificationReport

    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    reports = []
    for rep in payload["reports"]:
        rep = dict(rep)
        rep["mean_twcrps"] = {float(k): v for k, v in rep["mean_twcrps"].items()}
        reports.append(VerificationReport(**{f.name: rep[f.name] for f in fields(VerificationReport)}))
    return reports


def write_table(path, header, rows):
    """Plain CSV table helper for histograms and test matrices."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6g}" if math.isinf(v) else f"{float(v):.6f}"
    return str(v)
