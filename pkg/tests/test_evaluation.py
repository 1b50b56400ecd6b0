import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cartyield.errors import EvaluationError, KeyMismatch, ZeroGroundTruthCount, ZeroGroundTruthMass
from cartyield.evaluation import (GroundTruth, MetricReport, TraySegmentTruth, bland_altman, evaluate, pearson,
                                  read_tray_counts, read_tray_events, row_level_accuracy, segment_estimates,
                                  tray_count_accuracy, tray_count_estimate, tray_level_accuracy,
                                  write_tray_counts, write_tray_events)
from cartyield.yields import FOOT, YieldPoints

from test_yields import _points


def seg(tray, s, row, y0, y1, mass, cart="c1", day="d1"):
    return TraySegmentTruth(cart, day, tray, s, row, y0, y1, "E", "F", mass)


# segment and tray mass accuracy ---------------------------------------------------

def test_perfect_estimates():
    gt = {("c", "d", 0, 0): 2.0, ("c", "d", 0, 1): 2.2}
    assert row_level_accuracy(gt, gt) == 100.0
    assert tray_level_accuracy(gt, gt) == 100.0


def test_single_segment_row_level():
    assert row_level_accuracy({("c", "d", 0, 0): 4.0}, {("c", "d", 0, 0): 3.6}) == pytest.approx(90.0)


def test_two_trays_row_level():
    gt = {("c", "d", 0, 0): 1.0, ("c", "d", 1, 0): 1.0}
    est = {("c", "d", 0, 0): 0.9, ("c", "d", 1, 0): 0.7}
    assert row_level_accuracy(gt, est) == pytest.approx(80.0)


def test_tray_level_cancellation():
    gt = {("c", "d", 0, 0): 2.0, ("c", "d", 0, 1): 2.0}
    est = {("c", "d", 0, 0): 2.2, ("c", "d", 0, 1): 1.8}
    assert tray_level_accuracy(gt, est) == pytest.approx(100.0)
    assert row_level_accuracy(gt, est) == pytest.approx(80.0)


def test_tray_level_average_mass():
    assert tray_level_accuracy({("c", "d", 0, 0): 4.25}, {("c", "d", 0, 0): 4.0}) == pytest.approx(94.1176, abs=1e-4)


def test_key_and_zero_errors():
    with pytest.raises(KeyMismatch):
        row_level_accuracy({("c", "d", 0, 0): 1.0}, {("c", "d", 0, 1): 1.0})
    with pytest.raises(ZeroGroundTruthMass):
        row_level_accuracy({("c", "d", 0, 0): 0.0}, {("c", "d", 0, 0): 1.0})
    with pytest.raises(EvaluationError):
        tray_level_accuracy({}, {})


# tray counts ---------------------------------------------------------------------------

def test_count_estimate():
    assert tray_count_estimate(42.5).raw == pytest.approx(10.0) and tray_count_estimate(42.5).rounded == 10
    assert tray_count_estimate(0.0).raw == 0 and tray_count_estimate(0.0).rounded == 0


def test_count_accuracy_cases():
    cm = tray_count_accuracy({("c", "d"): 10}, {("c", "d"): 9})
    assert cm.accuracy == pytest.approx(90.0) and cm.mae == 1.0 and math.isnan(cm.pearson_r)

    gt = {("a", "d"): 10, ("b", "d"): 14, ("c", "d"): 7}
    cm = tray_count_accuracy(gt, gt)
    assert cm.accuracy == 100.0 and cm.mae == 0.0 and cm.pearson_r == pytest.approx(1.0)

    with pytest.raises(ZeroGroundTruthCount):
        tray_count_accuracy({("c", "d"): 0}, {("c", "d"): 1})
    with pytest.raises(KeyMismatch):
        tray_count_accuracy({("c", "d"): 3}, {("c", "e"): 3})


def test_zero_true_days_are_excluded():
    cm = tray_count_accuracy({("a", "d1"): 10, ("a", "d2"): 0}, {("a", "d1"): 10, ("a", "d2"): 2})
    assert cm.accuracy == 100.0 and cm.excluded == (("a", "d2"),)


def test_constant_shift():
    gt = np.array([10.0, 12.0, 7.0, 15.0])
    est = gt + 1
    assert pearson(gt, est) == pytest.approx(1.0)
    ba = bland_altman(gt, est)
    assert ba.mean_diff == pytest.approx(-1.0) and ba.sd == pytest.approx(0.0, abs=1e-12)


def test_pearson_degenerate():
    assert math.isnan(pearson([1.0], [2.0]))
    assert math.isnan(pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=40))
def test_pearson_matches_numpy(pairs):
    a, b = (np.array(v) for v in zip(*pairs))
    r = pearson(a, b)
    if math.isnan(r):
        assert a.std() == 0 or b.std() == 0 or np.ptp(a) < 1e-12 or np.ptp(b) < 1e-12
    else:
        assert -1 - 1e-12 <= r <= 1 + 1e-12
        if a.std() > 1e-6 and b.std() > 1e-6:
            assert r == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-9)


# allocation of yield points to marker intervals -------------------------------------------

def test_overlap_allocation():
    pts = _points([0.0, 0.0], [1.0, 2.0], [0.5, 0.5])
    pts.row[:] = 0
    est = segment_estimates(pts, [seg(0, 0, 0, 1.0 + FOOT / 2, 10.0, 1.0, cart="c"),
                                 seg(0, 1, 0, 0.0, 1.0 + FOOT / 2, 1.0, cart="c")])
    assert est[("c", "d1", 0, 0)] == pytest.approx(0.75)
    assert est[("c", "d1", 0, 1)] == pytest.approx(0.25)


@given(st.lists(st.floats(0, 20), min_size=1, max_size=40), st.lists(st.floats(0.1, 19.9), min_size=1, max_size=4))
def test_allocation_conserves_mass(ys, cuts):
    pts = _points(np.zeros(len(ys)), ys, np.full(len(ys), 0.125))
    pts.row[:] = 0
    edges = sorted({0.0, 20.0 + FOOT, *cuts})
    segs = [seg(0, i, 0, a, b, 1.0, cart="c") for i, (a, b) in enumerate(zip(edges, edges[1:]))]
    est = segment_estimates(pts, segs)
    assert math.fsum(est.values()) == pytest.approx(pts.dw.sum(), abs=1e-9)


# files and report ------------------------------------------------------------------------------

def test_truth_files_round_trip(tmp_path):
    segs = [seg(0, 0, 3, 20.0, 4.5, 3.1), seg(0, 1, 4, 20.0, 18.0, 1.05)]
    write_tray_events(segs, tmp_path / "e.csv")
    assert read_tray_events(tmp_path / "e.csv") == segs
    counts = {("c1", "d1"): 7, ("c2", "d1"): 0}
    write_tray_counts(counts, tmp_path / "n.csv")
    assert read_tray_counts(tmp_path / "n.csv") == counts


def test_report_round_trip_and_day_evaluation():
    pts = _points([1.0] * 4, [0.0, 1.0, 2.0, 3.0], [1.0] * 4, cart="c1")
    pts.row[:] = 2
    truth = GroundTruth([seg(0, 0, 2, 0.0, 4.0, 4.0)], {("c1", "d1"): 1})
    rep = evaluate({"d1": pts}, truth, 0.25, avg_tray_mass=4.0)
    assert rep.row_level_acc == pytest.approx(100.0) and rep.tray_count_acc == pytest.approx(100.0)
    assert rep.n_trays == 1 and math.isnan(rep.pearson_r)
    back = MetricReport.from_kv(rep.to_kv())
    assert back.row_level_acc == rep.row_level_acc and back.n_cart_days == 1 and math.isnan(back.pearson_r)
    assert "undefined" in rep.to_text()
