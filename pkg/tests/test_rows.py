import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cartyield.errors import SeriesTooShort
from cartyield.ingest import CartTrack
from cartyield.rows import (OccupancyConflict, RowConfig, assign_rows, detect_occupancy_conflicts, overlap,
                            resolve_occupancy, resolve_row_completion, row_completion_violations, sigma,
                            time_per_row, travel_direction)
from cartyield.sim import SimConfig, field_model

from test_field import box_field

F = box_field([0.0, 1.22, 2.44, 3.66, 4.88, 6.10, 7.32], 1.22, y1=40.0)


def make_track(cart, legs, t0=0.0, dt=0.1, flags=None):
    """legs: (row, y_start, y_end, seconds); rows already assigned, one cluster per leg."""
    cols = {k: [] for k in ("t", "y", "row", "cluster", "flag")}
    t = t0
    for i, (r, y0, y1, secs) in enumerate(legs):
        n = int(round(secs / dt))
        cols["t"].append(t + dt * np.arange(n))
        cols["y"].append(np.linspace(y0, y1, n))
        cols["row"].append(np.full(n, r))
        cols["cluster"].append(np.full(n, i))
        cols["flag"].append(np.full(n, bool(flags and flags[i])))
        t += dt * n + 5.0
    c = {k: np.concatenate(v) for k, v in cols.items()}
    n = c["t"].size
    x = F.rows[c["row"]]
    tr = CartTrack(cart, x, c["y"], c["t"], np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n), np.arange(n))
    tr.y_s = tr.y.copy()
    tr.row = c["row"].astype(np.int64)
    tr.row_new = tr.row.copy()
    tr.cluster = c["cluster"]
    tr.flag = c["flag"]
    tr.direction = np.where(np.concatenate([np.full(int(round(s / dt)), np.sign(b - a) or 1)
                                            for _, a, b, s in legs]) > 0, 1, -1).astype(np.int8)
    return tr


# travel direction ----------------------------------------------------------------

def test_direction_monotone_and_constant():
    assert travel_direction([0, 1, 2, 3]).tolist() == [1, 1, 1, 1]
    assert travel_direction(np.full(20, 3.0)).tolist() == [1] * 20


def test_direction_single_peak():
    y = np.concatenate([np.linspace(0, 5, 6), np.linspace(4.2, 1.0, 5)])
    assert travel_direction(y).tolist() == [1] * 5 + [-1] * 6


def test_direction_too_short():
    with pytest.raises(SeriesTooShort):
        travel_direction([1.0])


@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=300))
def test_direction_shape(y):
    d = travel_direction(y)
    assert d.shape == (len(y),) and set(d.tolist()) <= {-1, 1}


@given(st.floats(3, 30), st.integers(20, 200))
def test_direction_back_and_forth(amp, n):
    y = np.concatenate([np.linspace(0, amp, n), np.linspace(amp, 0, n)[1:]])
    d = travel_direction(y)
    assert np.all(d[:n - 1] == 1) and np.all(d[n:] == -1)


# stage 2 --------------------------------------------------------------------------

def _raw(x, y, t):
    n = len(t)
    return CartTrack("c", np.asarray(x, float), np.asarray(y, float), np.asarray(t, float), np.zeros(n),
                     np.zeros(n), np.zeros(n), np.zeros(n), np.arange(n))


def test_one_row_one_burst():
    t = np.arange(500) * 0.1
    out = assign_rows(_raw(np.full(500, F.rows[3]), np.linspace(20, 12, 500), t), F)
    assert set(out.cluster.tolist()) == {0} and set(out.row.tolist()) == {3}
    assert np.array_equal(out.row, out.row_new) and not out.flag.any()


def test_two_bursts_ten_minutes_apart():
    t = np.r_[np.arange(300) * 0.1, 600 + np.arange(300) * 0.1]
    x = np.r_[np.full(300, F.rows[0]), np.full(300, F.rows[1])]
    y = np.r_[np.linspace(20, 15, 300), np.linspace(20, 15, 300)]
    out = assign_rows(_raw(x, y, t), F)
    assert len(set(out.cluster.tolist())) == 2
    assert out.row[:300].tolist() == [0] * 300 and out.row[300:].tolist() == [1] * 300


def test_jittered_points_stay_on_row():
    f = box_field([0.0, 1.63, 3.26, 4.89], 1.63, y1=40.0)
    rng = np.random.default_rng(3)
    t = np.arange(2000) * 0.1
    x = f.rows[2] + rng.uniform(-0.5, 0.5, t.size)
    out = assign_rows(_raw(x, np.linspace(20, 0, t.size), t), f)
    assert len(out) == t.size and set(out.row.tolist()) == {2}


# stage 3 --------------------------------------------------------------------------

def test_single_row_untouched():
    tr = make_track("a", [(2, 20, 0, 120)])
    out = resolve_row_completion(tr, F)
    assert np.array_equal(out.row_new, tr.row) and not out.flag.any()


def test_seventy_thirty_same_direction():
    tr = make_track("a", [(2, 20, 6, 70), (3, 6, 0, 30)])
    out = resolve_row_completion(tr, F)
    assert set(out.row_new.tolist()) == {2}
    assert out.flag.mean() == pytest.approx(0.3)
    assert np.array_equal(out.flag, tr.row == 3)


def test_opposite_directions_untouched():
    tr = make_track("a", [(2, 20, 0, 70), (3, 0, 20, 30)])
    out = resolve_row_completion(tr, F)
    assert np.array_equal(out.row_new, tr.row) and not out.flag.any()


def test_sandwiched_excursion_returns():
    tr = make_track("a", [(2, 20, 14, 60), (3, 14, 9, 40), (2, 9, 0, 60)])
    out = resolve_row_completion(tr, F)
    assert set(out.row_new.tolist()) == {2}
    assert not row_completion_violations(out)


def test_new_task_in_neighbour_row_untouched():
    # finishes row 2 at the headland, starts row 3 from mid-row: sequential, not a violation
    tr = make_track("a", [(2, 20, 0, 120), (3, 20, 0, 60)])
    out = resolve_row_completion(tr, F)
    assert np.array_equal(out.row_new, tr.row)


def test_time_per_row_caps_gaps():
    t = np.array([0.0, 0.1, 0.2, 10.0, 10.1])
    assert time_per_row(t, np.array([1, 1, 1, 1, 1]), 1.0) == {1: pytest.approx(1.3)}


def test_sigma_indicator():
    tr = make_track("a", [(2, 20, 0, 10)])
    assert sigma(tr, 0, 5, 2, -1) == 1
    assert sigma(tr, 0, 5, 2, 1) == 0
    assert sigma(tr, 100, 200, 2, -1) == 0


# stage 4 --------------------------------------------------------------------------

def test_overlap_formula():
    assert overlap((0, 20), (25, 40)) == 0
    assert overlap((10, 20), (15, 30)) == 5


def test_disjoint_ranges_no_conflict():
    a = make_track("a", [(2, 0, 20, 50)])
    b = make_track("b", [(2, 25, 40, 50)])
    assert detect_occupancy_conflicts([a, b], 3.0) == []


def test_overlap_threshold():
    a = make_track("a", [(2, 10, 20, 50)])
    b = make_track("b", [(2, 15, 30, 50)])
    assert [c.overlap for c in detect_occupancy_conflicts([a, b], 3.0)] == [5]
    assert detect_occupancy_conflicts([a, b], 6.0) == []


def test_three_carts_all_pairs():
    ts = [make_track(c, [(4, lo, lo + 20, 50)]) for c, lo in (("a", 0), ("b", 4), ("c", 8))]
    got = {(c.cart_k, c.cart_l) for c in detect_occupancy_conflicts(ts, 3.0)}
    want = {(p.cart_id, q.cart_id) for p, q in itertools.combinations(ts, 2)
            if overlap((p.y.min(), p.y.max()), (q.y.min(), q.y.max())) > 3.0}
    assert got == want and len(got) == 3


def test_opposite_directions_may_share_a_row():
    a = make_track("a", [(2, 0, 20, 50)])
    b = make_track("b", [(2, 20, 0, 50)])
    assert detect_occupancy_conflicts([a, b], 3.0) == []


def test_flagged_cart_moves():
    a = make_track("a", [(3, 20, 0, 100)])
    b = make_track("b", [(2, 20, 12, 60), (3, 12, 0, 60)], flags=[False, True])
    b.row[b.cluster == 1] = 2          # initially assigned to row 2, moved by stage 3
    conf = detect_occupancy_conflicts([a, b], 3.0)
    res = resolve_occupancy([a, b], conf, F)
    ra, rb = res.tracks
    assert np.array_equal(ra.row_new, a.row_new)
    assert set(rb.row_new.tolist()) == {2}
    assert res.resolved[0][1:] == ("b", 2)


def test_shorter_cart_moves():
    k = make_track("k", [(2, 20, 5, 100)])
    l = make_track("l", [(1, 40, 20, 100), (2, 20, 5, 40)])
    conf = detect_occupancy_conflicts([k, l], 3.0)
    assert len(conf) == 1
    res = resolve_occupancy([k, l], conf, F)
    assert res.resolved[0][1] == "l"
    assert np.array_equal(res.tracks[0].row_new, k.row_new)
    assert not detect_occupancy_conflicts(res.tracks, 3.0)


def test_no_available_row():
    k = make_track("k", [(3, 20, 5, 100)])
    l = make_track("l", [(3, 20, 5, 40)])
    blockers = [make_track(f"z{r}", [(r, 20, 5, 100)]) for r in (1, 2, 4, 5)]
    conf = detect_occupancy_conflicts([k, l], 3.0)
    res = resolve_occupancy([k, l] + blockers, conf, F)
    assert res.unresolved == conf and not res.resolved
    for before, after in zip([k, l] + blockers, res.tracks):
        assert np.array_equal(before.row_new, after.row_new)


def test_resolution_leaves_no_conflict_in_simulation():
    from conftest import processed_day

    _, _, _, res = processed_day(SimConfig(seed=2, persistent_prob=1.0))
    tracks = [t for t in res.stage4.values() if len(t)]
    left = detect_occupancy_conflicts(tracks, 3.0)
    assert {(c.cart_k, c.cart_l, c.row) for c in left} <= {(c.cart_k, c.cart_l, c.row)
                                                          for c in res.occupancy.unresolved}
