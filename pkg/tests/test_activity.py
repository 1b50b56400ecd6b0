import numpy as np
import pytest
from hypothesis import given, strategies as st

from cartyield.activity import (ActivityWindow, BaselineClassifier, Label, baseline_classifier, classify_track,
                                filter_boundary, filter_picking, windows)
from cartyield.ingest import CartTrack
from cartyield.sim import S, SimConfig, noiseless

from conftest import sim_tracks
from test_field import box_field


def track(n, mass=None, accel=None, x=None, y=None):
    z = np.zeros(n)
    acc = np.zeros((n, 3)) if accel is None else accel
    return CartTrack("c", z if x is None else x, z if y is None else y, np.arange(n) * 0.1,
                     z if mass is None else mass, acc[:, 0], acc[:, 1], acc[:, 2], np.arange(n))


def test_window_partition():
    assert [len(w) for w in windows(track(250))] == [100, 100, 50]
    assert [w.start for w in windows(track(250))] == [0, 100, 200]


def test_quiet_cart_is_not_picking():
    assert all(lab is Label.NOPICK for _, lab in classify_track(track(300), BaselineClassifier()))


def test_clean_step_is_picking():
    m = np.where(np.arange(100) < 50, 1.0, 1.3)
    assert baseline_classifier(ActivityWindow(0, m, np.zeros((100, 3)))) is Label.PICK


def test_tray_removal_is_not_picking():
    m = np.linspace(4.8, 0.0, 100)
    assert baseline_classifier(ActivityWindow(0, m, np.zeros((100, 3)))) is Label.NOPICK


def test_carried_cart_is_not_picking():
    rng = np.random.default_rng(1)
    w = ActivityWindow(0, np.linspace(1.0, 1.5, 100), rng.normal(0, 3.0, (100, 3)))
    assert baseline_classifier(w) is Label.NOPICK


def test_spike_does_not_count_as_rise():
    m = np.full(100, 2.0)
    m[95] = 5.0
    assert baseline_classifier(ActivityWindow(0, m, np.zeros((100, 3)))) is Label.NOPICK


@given(st.lists(st.floats(0, 5), min_size=1, max_size=400))
def test_filter_keeps_exactly_the_pick_windows(masses):
    m = np.array(masses)
    clf = BaselineClassifier()
    want = [i for s in range(0, m.size, 100)
            if clf(ActivityWindow(s, m[s:s + 100], np.zeros((min(100, m.size - s), 3)))) is Label.PICK
            for i in range(s, min(s + 100, m.size))]
    assert filter_picking(track(m.size, mass=m), clf).src.tolist() == want


def test_noiseless_sim_labels_match_truth():
    cfg = noiseless(SimConfig(crew=2, n_rows=10, seed=4))
    _, tracks, truth = sim_tracks(cfg)
    tp = fp = fn = 0
    for c, tr in tracks.items():
        state = truth.carts[c].state[tr.src]
        for w, lab in classify_track(tr, BaselineClassifier()):
            major = np.bincount(state[w.start:w.start + len(w)], minlength=len(S)).argmax() == S["picking"]
            pred = lab is Label.PICK
            tp += pred and major
            fp += pred and not major
            fn += major and not pred
    f1 = 2 * tp / (2 * tp + fp + fn)
    assert f1 >= 0.95


def test_boundary_filter():
    f = box_field([1.0, 2.0, 3.0], 1.0)        # x in [0.5, 3.5], y in [0, 10]
    x = np.array([2.0, 0.5, 3.6, 2.0, 2.0])
    y = np.array([5.0, 0.0, 5.0, -0.1, 10.0])
    out = filter_boundary(track(5, x=x, y=y), f)
    assert out.src.tolist() == [0, 1, 4]
    centre = filter_boundary(track(4, x=np.full(4, 2.0), y=np.full(4, 5.0)), f)
    assert len(centre) == 4
