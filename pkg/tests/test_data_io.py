import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from emosmix.data_io import (
    RunConfig,
    load_coefficients,
    load_dataset,
    load_forecasts,
    parse_config,
    read_report_json,
    report_columns,
    save_coefficients,
    save_dataset,
    save_forecasts,
    write_report,
)
from emosmix.distributions import EmpiricalDistribution, LogNormal, MixtureTnLn, TruncNormal
from emosmix.errors import DataFormatError
from emosmix.estimation import DateCalibration, FitResult
from emosmix.models import CoefficientSet, ForecastCase
from emosmix.verification import VerificationReport

HEADER = "date,station_id,observation,member_1,member_2,member_3\n"


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_sorts_rows(tmp_path):
    path = _write(
        tmp_path,
        HEADER + "2010-01-02,B,3.5,1,2,3\n2010-01-01,B,1.0,1,2,3\n2010-01-01,A,2.0,4,5,6\n",
    )
    cases, m = load_dataset(path)
    assert m == 3 and len(cases) == 3
    assert [(c.date.day, c.station_id) for c in cases] == [(1, "A"), (1, "B"), (2, "B")]


def test_negative_member_names_the_line(tmp_path):
    path = _write(tmp_path, HEADER + "2010-01-01,A,2.0,4,5,6\n2010-01-02,A,2.0,4,-5,6\n")
    with pytest.raises(DataFormatError, match=r"data.csv:3"):
        load_dataset(path)


def test_malformed_rows(tmp_path):
    with pytest.raises(DataFormatError, match=":2"):
        load_dataset(_write(tmp_path, HEADER + "2010-01-01,A,2.0,4,5\n"))
    with pytest.raises(DataFormatError, match=":2"):
        load_dataset(_write(tmp_path, HEADER + "2010-13-01,A,2.0,4,5,6\n"))
    with pytest.raises(DataFormatError, match="header"):
        load_dataset(_write(tmp_path, "when,where,obs,m1,m2\n"))


def test_empty_observation_is_missing(tmp_path):
    cases, _ = load_dataset(_write(tmp_path, HEADER + "2010-01-01,A,,4,5,6\n"))
    assert cases[0].observation is None and not cases[0].has_observation


finite = st.floats(0, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.tuples(st.lists(finite, min_size=3, max_size=3), st.one_of(st.none(), finite)), min_size=1, max_size=8))
def test_dataset_round_trip_is_exact(tmp_path, rows):
    cases = [
        ForecastCase(dt.date(2010, 1, 1) + dt.timedelta(days=i), f"S{i % 3}", members, obs)
        for i, (members, obs) in enumerate(rows)
    ]
    path = tmp_path / "rt.csv"
    save_dataset(cases, path)
    loaded, m = load_dataset(path)
    assert m == 3 and loaded == cases
    assert b"\r" not in path.read_bytes()


def test_config_parsing():
    text = """
    # run setup
    groups = control:1, ens:10   # trailing comment
    model = mixture
    objective = MAX_LIKELIHOOD
    window_days = 43
    twcrps_thresholds = 8, 10.5, 12
    nominal_coverage = 83.33
    seed = 11
    """
    cfg = parse_config(text)
    assert cfg.groups == [("control", 1), ("ens", 10)]
    assert cfg.model == "MIXTURE" and cfg.objective == "MAX_LIKELIHOOD"
    assert cfg.window_days == 43 and cfg.seed == 11
    assert cfg.twcrps_thresholds == [8.0, 10.5, 12.0]
    assert cfg.grouping().group_sizes == (1, 10)
    assert parse_config("twcrps_thresholds = auto").twcrps_thresholds is None
    assert parse_config("model = climatology").model == "CLIMATOLOGY"


@pytest.mark.parametrize(
    "text, field",
    [
        ("colour = blue", "colour"),
        ("window_days = many", "window_days"),
        ("groups = ens", "groups"),
        ("model = GEV", "model"),
        ("just words", "key = value"),
    ],
)
def test_config_errors_name_the_field(text, field):
    with pytest.raises(DataFormatError, match=field):
        parse_config(text, "run.cfg")


def test_config_group_size_mismatch():
    cfg = parse_config("groups = a:2, b:3")
    with pytest.raises(DataFormatError, match="groups"):
        cfg.check_members(6)


def _report(name="TN", crps=0.812345):
    return VerificationReport(
        model=name, mean_crps=crps, mean_twcrps={8.0: 0.2, 10.5: 0.05}, mean_logs=1.7, mae_median=1.1,
        rmse_mean=1.4, coverage_pct=92.5, avg_width=5.25, pit_values=[0.1, 0.7], rank_counts=[1, 1], n_cases=2,
    )


def test_report_csv_layout(tmp_path):
    path = tmp_path / "r.csv"
    write_report([_report(), _report("MIX", 0.7)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "model,CRPS,twCRPS@8,twCRPS@10.5,MAE,RMSE,coverage,avg_width,LogS,n_cases"
    assert lines[1] == "TN,0.812,0.200,0.050,1.100,1.400,92.50,5.250,1.700,2"
    assert report_columns([8.0])[:3] == ["model", "CRPS", "twCRPS@8"]


def test_empty_report_is_header_only(tmp_path):
    path = tmp_path / "r.csv"
    write_report([], path)
    assert path.read_text() == "model,CRPS,MAE,RMSE,coverage,avg_width,LogS,n_cases\n"


def test_report_json_round_trip(tmp_path):
    path = tmp_path / "r.json"
    reports = [_report(), _report("LN", float("nan"))]
    write_report(reports, path, "JSON")
    back = read_report_json(path)
    assert back[0] == reports[0]
    assert np.isnan(back[1].mean_crps)


def test_forecast_round_trip(tmp_path):
    day = dt.date(2010, 1, 5)
    cases = [ForecastCase(day, s, [1.0, 2.0]) for s in "ABCDE"]
    dists = [
        TruncNormal(2.1, 0.7),
        LogNormal(0.3, 0.45),
        MixtureTnLn(0.3, TruncNormal(1.0, 2.0), LogNormal(0.1, 0.2)),
        MixtureTnLn(1.0, TruncNormal(1.5, 2.0), LogNormal(0.1, 0.2)),
        EmpiricalDistribution([1.5, 0.25, 3.0]),
    ]
    path = tmp_path / "f.csv"
    save_forecasts(list(zip(cases, dists)), path)
    table = load_forecasts(path)
    assert table[(day, "A")] == dists[0]
    assert table[(day, "B")] == dists[1]
    back = table[(day, "C")]
    assert (back.weight, back.tn, back.ln) == (0.3, dists[2].tn, dists[2].ln)
    # degenerate mixtures are stored as their selected component
    assert table[(day, "D")] == dists[3].tn
    np.testing.assert_array_equal(table[(day, "E")].values, [0.25, 1.5, 3.0])


def test_coefficient_round_trip(tmp_path):
    coeffs = CoefficientSet("MIXTURE", tn=(0.1, 0.2, 0.3, 0.4, 0.5), ln=(1.1, 1.2, 1.3, 1.4, 1.5), weight=0.65)
    day = dt.date(2010, 2, 1)
    calib = {day: DateCalibration(day, fits={None: FitResult(coeffs, 0.5, 12, True)})}
    path = tmp_path / "c.csv"
    save_coefficients(calib, 2, path)
    assert load_coefficients(path) == [(day, None, coeffs)]


def test_default_run_config():
    cfg = RunConfig()
    assert cfg.bootstrap_samples == 10_000 and cfg.bootstrap_size == 2_500
    assert cfg.pooling == "REGIONAL"
