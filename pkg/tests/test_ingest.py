import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cartyield.errors import DegenerateSamples, EmptyLog, HeaderMismatch, IngestError
from cartyield.field import fit_field_transform
from cartyield.ingest import (HEADER, Calibration, RawRecord, build_track, calibrate_load_cell, load_calibration,
                              parse_raw_log, save_calibration, serialize_logs)
from cartyield.kvfile import dataclass_from_kv, dataclass_to_kv, parse_kv

from test_field import geo_of


def rec(i, gnss=True, raw=100.0):
    t = 1.7e9 + 0.1 * i
    return RawRecord(t, t + 0.01 if gnss else None, 5000 + i, 36.9 + i * 1e-6, -121.7, 12.5, 0.1, -0.2, 9.81, raw)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
records = st.builds(RawRecord, finite, st.one_of(st.none(), finite), st.integers(-2**40, 2**40),
                    finite, finite, finite, finite, finite, finite, finite)


# parsing ----------------------------------------------------------------------------

def test_header_only_is_empty():
    with pytest.raises(EmptyLog):
        parse_raw_log(serialize_logs([]))
    with pytest.raises(EmptyLog):
        parse_raw_log(b"")


def test_bad_header():
    with pytest.raises(HeaderMismatch):
        parse_raw_log(b"a,b,c\n1,2,3\n")


def test_three_lines_round_trip():
    rs = [rec(i) for i in range(3)]
    parsed = parse_raw_log(serialize_logs(rs))
    assert parsed.records == rs and parsed.skipped == []


def test_truncated_line_reported():
    data = serialize_logs([rec(i) for i in range(3)]) + b"1.0,2.0,3\n"
    parsed = parse_raw_log(io.BytesIO(data))
    assert len(parsed) == 3 and parsed.skipped == [4]


def test_crlf_and_missing_gnss_time():
    data = serialize_logs([rec(0, gnss=False), rec(1)]).replace(b"\n", b"\r\n")
    parsed = parse_raw_log(data)
    assert parsed.skipped == []
    assert parsed.records[0].gnss_unix_ts is None
    assert parsed.records[0].timestamp == parsed.records[0].pi_unix_ts
    assert parsed.records[1].timestamp == parsed.records[1].gnss_unix_ts


def test_non_finite_values_skipped():
    good = serialize_logs([rec(0)])
    bad = good.split(b"\n")[1].replace(b"9.81", b"nan")
    parsed = parse_raw_log(good + bad + b"\n")
    assert parsed.skipped == [2]


@settings(max_examples=200)
@given(st.lists(records, max_size=30))
def test_serialize_parse_round_trip(rs):
    data = serialize_logs(rs)
    assert data.startswith(HEADER.encode())
    if not rs:
        assert data == (HEADER + "\n").encode()
        return
    parsed = parse_raw_log(data)
    assert parsed.skipped == []
    assert parsed.records == rs


def test_many_records_parse_without_skips():
    n = 200_000
    rs = [rec(i, gnss=i % 7 != 0, raw=float(i)) for i in range(n)]
    parsed = parse_raw_log(serialize_logs(rs))
    assert len(parsed) == n and parsed.skipped == []


# calibration ----------------------------------------------------------------------------

def test_exact_line():
    raw = np.array([0.0, 1.0, 2.0, 5.0])
    cal = calibrate_load_cell(np.column_stack([raw, 2 * raw + 0.5]))
    assert cal.slope == pytest.approx(2.0, abs=1e-12)
    assert cal.intercept == pytest.approx(0.5, abs=1e-12)
    assert cal.r_squared == 1.0


def test_symmetric_perturbation_cancels():
    # the same raw value appears twice with +eps and -eps: the normal equations are unchanged
    raw = np.repeat([0.0, 1.0, 3.0, 4.0], 2)
    eps = np.tile([0.01, -0.01], 4)
    cal = calibrate_load_cell(np.column_stack([raw, 2 * raw + 0.5 + eps]))
    assert cal.slope == pytest.approx(2.0, abs=1e-9)
    assert cal.intercept == pytest.approx(0.5, abs=1e-9)
    assert cal.r_squared < 1.0


def test_degenerate_calibration():
    with pytest.raises(DegenerateSamples):
        calibrate_load_cell([(3.0, 1.0), (3.0, 2.0)])
    with pytest.raises(DegenerateSamples):
        calibrate_load_cell([(1.0, 2.0), (2.0, 1.0)])


def test_calibration_file(tmp_path):
    cal = Calibration(1.25e-5, -0.031, 0.9999)
    save_calibration(cal, tmp_path / "c.txt")
    assert load_calibration(tmp_path / "c.txt") == cal
    with pytest.raises(IngestError):
        load_calibration(tmp_path / "missing.txt")


# track -------------------------------------------------------------------------------------

def _transform():
    local = np.array([[0.0, 0.0], [30.0, 0.0], [0.0, 40.0], [30.0, 40.0]])
    return fit_field_transform(geo_of(local[:, 0], local[:, 1]), local)


def test_empty_track():
    tr = build_track([], Calibration(1.0, 0.0, 1.0), _transform(), "c1")
    assert len(tr) == 0 and tr.cart_id == "c1"


def test_origin_record():
    lat, lon = geo_of(0.0, 0.0)[0]
    r = RawRecord(1.0, 2.0, 0, lat, lon, 0.0, 0.0, 0.0, 9.8, 0.0)
    tr = build_track([r], Calibration(2.0, 0.55, 1.0), _transform(), "c1")
    assert abs(tr.x[0]) < 1e-6 and abs(tr.y[0]) < 1e-6
    assert tr.mass[0] == 0.55
    assert tr.t[0] == 2.0


def test_timestamps_bit_exact():
    rs = [rec(i, gnss=i % 3 != 0) for i in range(500)]
    tr = build_track(rs, Calibration(1.0, 0.0, 1.0), _transform(), "c1")
    assert len(tr) == 500
    assert tr.t.tolist() == [r.timestamp for r in rs]
    assert tr.src.tolist() == list(range(500))


# key = value documents ------------------------------------------------------------------

def test_kv_dataclass_round_trip():
    from cartyield.pipeline import PipelineConfig
    from cartyield.sim import SimConfig

    for cfg in (PipelineConfig(tau=0.07, day="day03"), SimConfig(quota=(3.0, 5.0), dead_zone=(1.0, 2.0, 3.0, 4.0))):
        assert dataclass_from_kv(type(cfg), parse_kv(dataclass_to_kv(cfg))) == cfg


def test_kv_rejects_unknown_keys_and_bad_lines():
    from cartyield.pipeline import PipelineConfig

    with pytest.raises(KeyError):
        dataclass_from_kv(PipelineConfig, parse_kv("no_such_threshold = 1\n"))
    with pytest.raises(ValueError):
        parse_kv("just words\n")
    assert math.isclose(PipelineConfig.from_kv("# comment\n\ntau = 0.1\n").tau, 0.1)
