"""Stage 1: drop non-picking windows and points outside the field boundary.

A classifier is any callable ``(ActivityWindow) -> Label``. The trained
network used on the real carts is not shipped; :class:`BaselineClassifier` is
a threshold heuristic on the mass and acceleration channels that stands in
for it. To plug in a learned model, wrap its predict call in a function with
the same signature and pass it to :func:`classify_track`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .field import FieldModel, point_in_boundary
from .ingest import CartTrack

WINDOW = 100


class Label(enum.Enum):
    PICK = "Pick"
    NOPICK = "NoPick"


@dataclass(frozen=True)
class ActivityWindow:
    start: int  # index of first point in the track
    mass: np.ndarray
    accel: np.ndarray  # (n, 3)

    def __len__(self):
        return self.mass.size


def robust_accel_var(accel: np.ndarray) -> float:
    dev = accel - np.median(accel, axis=0)
    return float(np.median(np.sum(dev * dev, axis=1)))


class ClassifierInterface(Protocol):
    def __call__(self, w: ActivityWindow) -> Label: ...


@dataclass(frozen=True)
class BaselineClassifier:
    """Pick iff mass rises by at least ``m_step`` and the cart is not being shaken.

    The rise is the median of the last ``edge`` samples minus the median of
    the first ``edge`` samples, so single-sample spikes do not count. Shaking
    is a robust acceleration variance: per sample, the squared distance from
    the window's median acceleration vector; the window's score is the median
    of those. A window that is mostly quiet therefore counts as quiet even
    when the cart starts moving near its end.
    """

    m_step: float = 0.1
    a_max_var: float = 4.0
    edge: int = 10

    def __call__(self, w: ActivityWindow) -> Label:
        n = len(w)
        if n == 0:
            return Label.NOPICK
        k = max(1, min(self.edge, n // 2))
        rise = float(np.median(w.mass[-k:]) - np.median(w.mass[:k]))
        accel_var = robust_accel_var(w.accel) if n > 1 else 0.0
        if rise >= self.m_step and accel_var < self.a_max_var:
            return Label.PICK
        return Label.NOPICK


def baseline_classifier(w: ActivityWindow, m_step: float = 0.1, a_max_var: float = 4.0) -> Label:
    return BaselineClassifier(m_step, a_max_var)(w)


def windows(track: CartTrack, size: int = WINDOW) -> list[ActivityWindow]:
    accel = np.column_stack([track.ax, track.ay, track.az])
    return [ActivityWindow(s, track.mass[s:s + size], accel[s:s + size])
            for s in range(0, len(track), size)]


def classify_track(track: CartTrack, classifier: Callable[[ActivityWindow], Label],
                   size: int = WINDOW) -> list[tuple[ActivityWindow, Label]]:
    return [(w, classifier(w)) for w in windows(track, size)]


def pick_mask(labelled, n: int) -> np.ndarray:
    keep = np.zeros(n, dtype=bool)
    for w, label in labelled:
        if label is Label.PICK:
            keep[w.start:w.start + len(w)] = True
    return keep


def filter_picking(track: CartTrack, classifier, size: int = WINDOW) -> CartTrack:
    if len(track) == 0:
        return track
    return track.take(pick_mask(classify_track(track, classifier, size), len(track)))


def filter_boundary(track: CartTrack, f: FieldModel) -> CartTrack:
    if len(track) == 0:
        return track
    return track.take(np.asarray(point_in_boundary(f, track.x, track.y), dtype=bool))
