import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pondcast.datapipe import (
    HISTORY_VARIABLES,
    STEP,
    DataError,
    ForecastArchive,
    SensorFrame,
    Standardizer,
    TimeSeries,
    impute,
    impute_values,
    leave_one_out_split,
    load_csv,
    load_dataset,
    load_forecast_csv,
    make_windows,
    parse_time,
    resample_forecast,
    standardize_apply,
    standardize_fit,
    standardize_invert,
    valid_runs,
    window_count,
    write_csv,
    write_forecast_csv,
)

T0 = parse_time("2021-03-01T00:00:00Z")


def _write(tmp_path, rows, header="timestamp,sensor_id,variable,value"):
    path = tmp_path / "s.csv"
    path.write_text("\n".join([header] + rows) + "\n")
    return path


# -- load_csv ----------------------------------------------------------------

def test_load_two_rows(tmp_path):
    path = _write(tmp_path, ["2021-03-01T00:00:00Z,A,do,6.5", "2021-03-01T00:15:00Z,A,do,6.7"])
    series = load_csv(path)
    ts = series[("A", "do")]
    assert len(ts) == 2
    assert ts.times[1] - ts.times[0] == STEP
    np.testing.assert_array_equal(ts.values, [6.5, 6.7])


def test_load_off_grid(tmp_path):
    path = _write(tmp_path, ["2021-03-01T00:00:00Z,A,do,6.5", "2021-03-01T01:07:00Z,A,do,6.7"])
    with pytest.raises(DataError, match="off-grid timestamp") as err:
        load_csv(path)
    assert "row 3" in str(err.value)


def test_load_empty_value_is_missing(tmp_path):
    path = _write(tmp_path, ["2021-03-01T00:00:00Z,A,do,6.5", "2021-03-01T00:15:00Z,A,do,",
                             "2021-03-01T00:30:00Z,A,do,6.9"])
    values = load_csv(path)[("A", "do")].values
    assert np.isnan(values[1]) and values[2] == 6.9


@pytest.mark.parametrize("row,needle", [
    ("2021-03-01T00:00:00Z,A,do,6.5", "duplicate"),
    ("not-a-time,A,do,6.5", "row 3"),
    ("2021-03-01T00:15:00Z,A,salinity,30", "unknown variable"),
])
def test_load_errors(tmp_path, row, needle):
    path = _write(tmp_path, ["2021-03-01T00:00:00Z,A,do,6.5", row])
    with pytest.raises(DataError, match=needle):
        load_csv(path)


def test_load_bad_header(tmp_path):
    path = _write(tmp_path, ["2021-03-01T00:00:00Z,A,do,6.5"], header="time,sensor,var,value")
    with pytest.raises(DataError):
        load_csv(path)


def test_csv_round_trip(tmp_path):
    vals = np.array([1.25, np.nan, 3.5, 4.0])
    series = [TimeSeries("B", "ph", T0, vals), TimeSeries("B", "do", T0 + STEP, vals[::-1])]
    path = tmp_path / "sensorB.csv"
    write_csv(series, path)
    back = load_csv(path)
    np.testing.assert_array_equal(back[("B", "ph")].values, vals)
    assert back[("B", "do")].start == T0 + STEP


# -- imputation --------------------------------------------------------------

def test_impute_midpoint():
    np.testing.assert_array_equal(impute_values(np.array([2.0, np.nan, 4.0])), [2, 3, 4])


def test_impute_eight_missing():
    v = np.array([0.0] + [np.nan] * 8 + [9.0])
    np.testing.assert_allclose(impute_values(v), np.arange(10.0), atol=1e-12)


def test_impute_nine_missing_splits():
    v = np.array([1.0, 2.0] + [np.nan] * 9 + [3.0, 4.0])
    segs = impute(TimeSeries("A", "do", T0, v))
    assert [len(s) for s in segs] == [2, 2]
    assert segs[1].start == T0 + 11 * STEP


def test_impute_trims_edges():
    v = np.array([np.nan, 1.0, np.nan, 3.0, np.nan])
    segs = impute(TimeSeries("A", "do", T0, v))
    assert len(segs) == 1
    np.testing.assert_array_equal(segs[0].values, [1, 2, 3])
    assert segs[0].start == T0 + STEP


def _impute_oracle(values, max_gap=8):
    # Scalar re-statement: walk the array and fill each bracketed short run.
    out = list(values)
    n = len(out)
    i = 0
    while i < n:
        if np.isnan(out[i]):
            j = i
            while j < n and np.isnan(values[j]):
                j += 1
            if i > 0 and j < n and j - i <= max_gap:
                lo, hi = values[i - 1], values[j]
                for k in range(i, j):
                    out[k] = lo + (hi - lo) * (k - i + 1) / (j - i + 1)
            i = j
        else:
            i += 1
    return np.array(out)


def test_impute_matches_oracle_on_random_gaps():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        v = rng.normal(size=n)
        pos = 0
        while pos < n:
            pos += int(rng.integers(0, 6))
            length = int(rng.integers(1, 12))
            v[pos:pos + length] = np.nan
            pos += length
        got, want = impute_values(v), _impute_oracle(v)
        np.testing.assert_array_equal(np.isnan(got), np.isnan(want))
        np.testing.assert_allclose(got[~np.isnan(got)], want[~np.isnan(want)], atol=1e-12, rtol=0)


@given(st.lists(st.one_of(st.none(), st.floats(-1e3, 1e3)), min_size=1, max_size=40))
def test_impute_keeps_observed(raw):
    v = np.array([np.nan if x is None else x for x in raw])
    out = impute_values(v)
    obs = ~np.isnan(v)
    np.testing.assert_array_equal(out[obs], v[obs])


# -- windows -----------------------------------------------------------------

def _frame(n, sensor="A", start=T0, seed=0, exo=False):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(n, len(HISTORY_VARIABLES)))
    ex = rng.normal(size=(n, 96)) if exo else None
    return SensorFrame(sensor, start, data, HISTORY_VARIABLES, ex)


@pytest.mark.parametrize("n,count", [(288, 1), (287, 0), (300, 13)])
def test_window_counts(n, count):
    assert window_count(n) == count
    assert len(make_windows([_frame(n)])) == count


def test_window_contents():
    f = _frame(300, exo=True)
    ws = make_windows([f])
    pair = ws[5]
    np.testing.assert_array_equal(pair.history, f.data[5:197])
    np.testing.assert_array_equal(pair.target, f.data[197:293, 0])
    np.testing.assert_array_equal(pair.exo, f.exo[196])
    assert pair.end_time == T0 + 196 * STEP


def _brute_count(mask, span):
    return sum(1 for s in range(len(mask) - span + 1) if mask[s:s + span].all())


def test_window_count_against_brute_force():
    rng = np.random.default_rng(1)
    in_len, out_len = 7, 4
    for _ in range(300):
        n = int(rng.integers(1, 80))
        mask = rng.random(n) > rng.uniform(0.0, 0.2)
        data = np.where(mask[:, None], rng.normal(size=(n, 5)), np.nan)
        frame = SensorFrame("A", T0, data)
        ws = make_windows([frame], in_len, out_len)
        assert len(ws) == _brute_count(mask, in_len + out_len)
        assert sum(window_count(b - a, in_len, out_len) for a, b in valid_runs(mask)) == len(ws)
        assert not np.isnan(ws.history).any() and not np.isnan(ws.target).any()


def test_windows_skip_missing_exo():
    f = _frame(300, exo=True)
    f.exo[196 + 3] = np.nan
    ws = make_windows([f])
    assert len(ws) == 12
    assert not np.isnan(ws.exo).any()


# -- standardisation ---------------------------------------------------------

def test_standardize_example():
    frame = SensorFrame("A", T0, np.array([[1.0], [2.0], [3.0]]), ("do",))
    st_ = standardize_fit([frame], ("do",))
    np.testing.assert_allclose(standardize_apply(st_, [1, 2, 3], "do"), [-1.2247448713915890, 0, 1.2247448713915890],
                               atol=1e-12)
    assert st_.std["do"] == pytest.approx(np.sqrt(2 / 3), abs=1e-15)


def test_standardize_moments_and_round_trip():
    frames = [_frame(500, "A", seed=2), _frame(400, "B", seed=3)]
    for f in frames:
        f.data = f.data * 3.0 + 10.0
    st_ = Standardizer.fit(frames)
    pooled = np.concatenate([f.data for f in frames])
    for j, v in enumerate(HISTORY_VARIABLES):
        z = st_.apply(pooled[:, j], v)
        assert abs(z.mean()) <= 1e-9 and abs(z.var() - 1) <= 1e-9
        np.testing.assert_allclose(standardize_invert(st_, z, v), pooled[:, j], atol=1e-12, rtol=0)


def test_standardize_degenerate():
    frame = SensorFrame("A", T0, np.ones((10, 1)), ("do",))
    with pytest.raises(DataError, match="degenerate variable"):
        Standardizer.fit([frame], ("do",))


@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=30), st.floats(0.1, 100), st.floats(-50, 50))
@settings(max_examples=60)
def test_standardize_round_trip_property(xs, sd, mu):
    st_ = Standardizer({"do": mu}, {"do": sd})
    x = np.array(xs)
    np.testing.assert_allclose(st_.invert(st_.apply(x, "do"), "do"), x, atol=1e-12 * max(1.0, np.abs(x).max()))


# -- forecasts ---------------------------------------------------------------

def test_resample_linear():
    np.testing.assert_array_equal(resample_forecast([10.0, 14.0], min_hours=1), [10, 11, 12, 13, 14])


def test_resample_constant_and_coverage():
    out = resample_forecast(np.full(25, 21.5))
    assert len(out) == 97 and np.all(out == 21.5)


def test_resample_too_short():
    with pytest.raises(DataError):
        resample_forecast(np.arange(24.0))


def test_exo_alignment():
    issued = T0 + np.arange(3) * np.timedelta64(1, "h")
    values = np.stack([np.arange(25.0) + 100 * i for i in range(3)])
    arch = ForecastArchive(issued.astype("datetime64[s]"), values)
    row = arch.exo_for(T0 + 2 * STEP)
    np.testing.assert_allclose(row[:2], [0.75, 1.0])
    assert row[-1] == 24.0 and row[-3] == 24.0  # held past the horizon
    assert arch.exo_for(T0 - STEP) is None
    assert arch.exo_for(T0 + np.timedelta64(6, "h")) is None


def test_forecast_csv_round_trip(tmp_path):
    issued = (T0 + np.arange(2) * np.timedelta64(1, "h")).astype("datetime64[s]")
    arch = ForecastArchive(issued, np.arange(50.0).reshape(2, 25) / 4)
    path = tmp_path / "forecast.csv"
    write_forecast_csv(arch, path)
    back = load_forecast_csv(path)
    np.testing.assert_array_equal(back.issued, arch.issued)
    np.testing.assert_array_equal(back.values, arch.values)


# -- leave-one-out -----------------------------------------------------------

def _three():
    return {s: _frame(400, s, seed=i) for i, s in enumerate("ABC")}


def test_loo_sensors():
    split = leave_one_out_split(_three(), "A")
    assert set(split.train.sensor) == {"B", "C"}
    assert set(split.test.sensor) == {"A"}
    assert split.plan.train_sensors == ["B", "C"]


def test_loo_exclusion_removes_sensor():
    frames = _three()
    split = leave_one_out_split(frames, "A", [("B", T0, T0 + 1000 * STEP)])
    assert set(split.train.sensor) == {"C"}


def test_loo_no_pair_overlaps_exclusion():
    frames = {s: _frame(900, s, seed=i) for i, s in enumerate("ABC")}
    ex_start, ex_end = T0 + 350 * STEP, T0 + 370 * STEP
    split = leave_one_out_split(frames, "A", [(None, ex_start, ex_end)])
    first = split.train.end_time - 191 * STEP
    last = split.train.end_time + 96 * STEP
    assert len(split.train) > 0
    assert not np.any((first <= ex_end) & (last >= ex_start))
    # the test sensor keeps its data
    assert len(split.test) == window_count(900)


def test_loo_uses_train_statistics():
    frames = _three()
    frames["A"].data = frames["A"].data + 50.0
    split = leave_one_out_split(frames, "A")
    assert split.test.history.mean() > 10.0


def test_loo_errors():
    with pytest.raises(DataError):
        leave_one_out_split(_three(), "Z")
    with pytest.raises(DataError):
        leave_one_out_split({"A": _frame(300)}, "A")


def test_load_dataset(tmp_path):
    n = 300
    for sensor in ("A", "B"):
        series = [TimeSeries(sensor, v, T0, np.sin(np.arange(n) / 10.0 + j) + j)
                  for j, v in enumerate(HISTORY_VARIABLES)]
        series[0].values[50:55] = np.nan
        write_csv(series, tmp_path / f"sensor_{sensor}.csv")
    issued = (T0 + np.arange(n // 4) * np.timedelta64(1, "h")).astype("datetime64[s]")
    write_forecast_csv(ForecastArchive(issued, np.ones((len(issued), 25))), tmp_path / "forecast.csv")
    frames, archive = load_dataset(tmp_path)
    assert sorted(frames) == ["A", "B"]
    assert not np.isnan(frames["A"].data).any()
    assert frames["A"].exo.shape == (n, 96)
    assert len(make_windows([frames["A"]])) == window_count(n)
