"""Accuracy metrics against ground truth: segment/tray mass accuracy, tray counts, agreement stats."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import kvfile
from .errors import EvaluationError, KeyMismatch, ZeroGroundTruthCount, ZeroGroundTruthMass
from .yields import AVG_TRAY_MASS, YieldPoints

STATUSES = ("E", "F", "P")


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraySegmentTruth:
    """Part of one tray harvested in one row, between two tray-event markers.

    ``start_status``/``end_status`` are E (empty tray placed), F (full tray
    lifted) or P (partially filled tray, carried on or lifted).
    """

    cart_id: str
    day: str
    tray: int
    seg: int
    row: int
    y_start: float
    y_end: float
    start_status: str
    end_status: str
    net_mass: float

    @property
    def key(self) -> tuple[str, str, int, int]:
        return self.cart_id, self.day, self.tray, self.seg

    @property
    def tray_key(self) -> tuple[str, str, int]:
        return self.cart_id, self.day, self.tray


@dataclass
class GroundTruth:
    segments: list[TraySegmentTruth]
    counts: dict[tuple[str, str], int]   # (cart_id, day) -> trays delivered

    def days(self) -> list[str]:
        return sorted({d for _, d in self.counts})


_SEG_FIELDS = [f.name for f in fields(TraySegmentTruth)]


def write_tray_events(segments, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_SEG_FIELDS)
        for s in segments:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(s, n) for n in _SEG_FIELDS)])


def read_tray_events(path) -> list[TraySegmentTruth]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(TraySegmentTruth(rec["cart_id"], rec["day"], int(rec["tray"]), int(rec["seg"]),
                                        int(rec["row"]), float(rec["y_start"]), float(rec["y_end"]),
                                        rec["start_status"], rec["end_status"], float(rec["net_mass"])))
    return out


def write_tray_counts(counts: Mapping[tuple[str, str], int], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cart_id", "day", "trays"])
        for (c, d), n in sorted(counts.items()):
            w.writerow([c, d, int(n)])


def read_tray_counts(path) -> dict[tuple[str, str], int]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["cart_id"], r["day"]): int(r["trays"]) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# mass accuracy
# ---------------------------------------------------------------------------

def _check_keys(gt: Mapping, est: Mapping) -> None:
    if set(gt) != set(est):
        missing = sorted(set(gt) ^ set(est), key=repr)[:5]
        raise KeyMismatch(f"ground truth and estimate keys differ, e.g. {missing}")


def _tray_groups(gt: Mapping) -> dict:
    groups: dict = defaultdict(list)
    for k in gt:
        groups[k[:-1]].append(k)
    return groups


def row_level_accuracy(gt: Mapping[tuple, float], est: Mapping[tuple, float]) -> float:
    """Percent accuracy over tray/row segments.

    Keys are tuples whose last element identifies the segment within a tray
    and whose leading elements identify the tray. Relative errors are summed
    within a tray and averaged over trays.
    """
    _check_keys(gt, est)
    if not gt:
        raise EvaluationError("no segments to evaluate")
    for k, v in gt.items():
        if not v > 0:
            raise ZeroGroundTruthMass(f"ground-truth mass for {k} is {v}")
    groups = _tray_groups(gt)
    err = math.fsum(math.fsum(abs(gt[k] - est[k]) / gt[k] for k in ks) for ks in groups.values())
    return 100.0 * (1.0 - err / len(groups))


def tray_level_accuracy(gt: Mapping[tuple, float], est: Mapping[tuple, float]) -> float:
    """Percent accuracy on per-tray totals (segment errors within a tray may cancel)."""
    _check_keys(gt, est)
    if not gt:
        raise EvaluationError("no segments to evaluate")
    groups = _tray_groups(gt)
    terms = []
    for tk, ks in groups.items():
        g = math.fsum(gt[k] for k in ks)
        if not g > 0:
            raise ZeroGroundTruthMass(f"ground-truth mass for tray {tk} is {g}")
        terms.append(abs(g - math.fsum(est[k] for k in ks)) / g)
    return 100.0 * (1.0 - math.fsum(terms) / len(groups))


def segment_estimates(points: YieldPoints, segments: list[TraySegmentTruth],
                      cart_day_of_point=None) -> dict[tuple, float]:
    """Estimated mass inside each truth segment's marker interval.

    A yield point covers ``[y_int, y_int + length]`` in its row; its increment
    is shared out in proportion to overlap. A zero-length point counts fully
    when it lies inside the interval. ``points`` must belong to the segments'
    day; cart ids are matched directly.
    """
    by_cart_row: dict = defaultdict(list)
    for i in range(len(points)):
        by_cart_row[(str(points.cart_id[i]), int(points.row[i]))].append(i)
    idx_cache = {k: np.asarray(v) for k, v in by_cart_row.items()}
    out = {}
    for s in segments:
        lo, hi = min(s.y_start, s.y_end), max(s.y_start, s.y_end)
        ii = idx_cache.get((s.cart_id, s.row))
        if ii is None:
            out[s.key] = 0.0
            continue
        a = points.y_int[ii]
        L = points.length[ii]
        dw = points.dw[ii]
        ov = np.clip(np.minimum(a + L, hi) - np.maximum(a, lo), 0.0, None)
        frac = np.where(L > 0, ov / np.where(L > 0, L, 1.0), ((a >= lo) & (a <= hi)).astype(float))
        out[s.key] = float(np.sum(dw * frac))
    return out


# ---------------------------------------------------------------------------
# tray counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrayCount:
    raw: float
    rounded: int


def tray_count_estimate(total_mass_kg: float, avg_tray_mass: float = AVG_TRAY_MASS) -> TrayCount:
    raw = float(total_mass_kg) / avg_tray_mass
    return TrayCount(raw, int(math.floor(raw + 0.5)))


def pearson(a, b) -> float:
    """Pearson r; NaN when either series has zero variance or fewer than two values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2:
        return float("nan")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(np.dot(da, da)), float(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        return float("nan")
    return float(np.dot(da, db) / math.sqrt(sa * sb))


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    sd: float
    lower: float
    upper: float
    n: int

    def within(self, a, b) -> float:
        d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        return float(np.mean((d >= self.lower) & (d <= self.upper))) if d.size else float("nan")


def bland_altman(a, b) -> BlandAltman:
    """Differences ``a - b``: mean and mean +/- 1.96 sample SD."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.size == 0:
        raise EvaluationError("no pairs for Bland-Altman analysis")
    m = float(d.mean())
    sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
    return BlandAltman(m, sd, m - 1.96 * sd, m + 1.96 * sd, int(d.size))


@dataclass(frozen=True)
class CountMetrics:
    accuracy: float
    mae: float
    rmse: float
    pearson_r: float
    bland_altman: BlandAltman
    n_cart_days: int
    excluded: tuple[tuple[str, str], ...]   # cart-days with zero ground-truth trays


def tray_count_accuracy(gt_counts: Mapping[tuple[str, str], float],
                        est_counts: Mapping[tuple[str, str], float]) -> CountMetrics:
    """Count accuracy averaged over each cart's days, then over carts.

    MAE, RMSE and Bland-Altman (gt - est) are over cart-days; Pearson r is over
    per-cart totals. Cart-days with zero true trays are excluded and listed.
    """
    _check_keys(gt_counts, est_counts)
    keys = sorted(k for k in gt_counts if gt_counts[k] > 0)
    excluded = tuple(sorted(k for k in gt_counts if not gt_counts[k] > 0))
    if not keys:
        raise ZeroGroundTruthCount("every cart-day has zero ground-truth trays")
    per_cart: dict[str, list[float]] = defaultdict(list)
    for k in keys:
        per_cart[k[0]].append(abs(gt_counts[k] - est_counts[k]) / gt_counts[k])
    acc = 100.0 * (1.0 - math.fsum(math.fsum(v) / len(v) for v in per_cart.values()) / len(per_cart))
    g = np.array([gt_counts[k] for k in keys], dtype=np.float64)
    e = np.array([est_counts[k] for k in keys], dtype=np.float64)
    carts = sorted(per_cart)
    tot_g = [math.fsum(gt_counts[k] for k in keys if k[0] == c) for c in carts]
    tot_e = [math.fsum(est_counts[k] for k in keys if k[0] == c) for c in carts]
    return CountMetrics(acc, float(np.mean(np.abs(g - e))), float(np.sqrt(np.mean((g - e) ** 2))),
                        pearson(tot_g, tot_e), bland_altman(g, e), len(keys), excluded)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    row_level_acc: float = float("nan")
    tray_level_acc: float = float("nan")
    tray_count_acc: float = float("nan")
    mae: float = float("nan")
    rmse: float = float("nan")
    pearson_r: float = float("nan")
    ba_mean_diff: float = float("nan")
    ba_lower: float = float("nan")
    ba_upper: float = float("nan")
    zero_yield_fraction: float = float("nan")
    n_segments: int = 0
    n_trays: int = 0
    n_cart_days: int = 0

    @property
    def pearson_defined(self) -> bool:
        return not math.isnan(self.pearson_r)

    def to_kv(self) -> str:
        return kvfile.format_kv([(k, repr(v)) for k, v in asdict(self).items()], header="metric report")

    @classmethod
    def from_kv(cls, text: str) -> "MetricReport":
        doc = kvfile.parse_kv(text)
        kw = {}
        for f in fields(cls):
            if f.name in doc:
                raw = kvfile.single(doc, f.name)
                kw[f.name] = int(raw) if f.type in ("int", int) else float(raw)
        return cls(**kw)

    def to_text(self) -> str:
        lines = [
            f"segments evaluated        {self.n_segments} ({self.n_trays} trays)",
            f"row-segment accuracy      {self.row_level_acc:.2f} %",
            f"tray accuracy             {self.tray_level_acc:.2f} %",
            f"tray count accuracy       {self.tray_count_acc:.2f} %  over {self.n_cart_days} cart-days",
            f"MAE / RMSE (trays)        {self.mae:.3f} / {self.rmse:.3f}",
            "Pearson r (cart totals)   " + (f"{self.pearson_r:.4f}" if self.pearson_defined
                                             else "undefined (zero variance)"),
            f"Bland-Altman gt-est       mean {self.ba_mean_diff:+.3f}, "
            f"limits [{self.ba_lower:+.3f}, {self.ba_upper:+.3f}]",
            f"zero-yield cells          {100 * self.zero_yield_fraction:.1f} %",
        ]
        return "\n".join(lines) + "\n"


def evaluate(points_by_day: Mapping[str, YieldPoints], truth: GroundTruth,
             zero_yield_fraction: float = float("nan"), avg_tray_mass: float = AVG_TRAY_MASS) -> MetricReport:
    """Full report for one or more days of pipeline output against simulator/field truth."""
    truth_days = {s.day for s in truth.segments} | {d for _, d in truth.counts}
    if truth_days != set(points_by_day):
        raise KeyMismatch(f"estimate days {sorted(points_by_day)} do not match ground-truth days {sorted(truth_days)}")
    rep = MetricReport(zero_yield_fraction=zero_yield_fraction)
    gt_seg, est_seg = {}, {}
    by_day: dict[str, list[TraySegmentTruth]] = defaultdict(list)
    for s in truth.segments:
        by_day[s.day].append(s)
    for day, segs in by_day.items():
        pts = points_by_day.get(day, YieldPoints.empty())
        est = segment_estimates(pts, segs)
        for s in segs:
            if s.net_mass > 0:
                gt_seg[s.key] = s.net_mass
                est_seg[s.key] = est[s.key]
    if gt_seg:
        rep.row_level_acc = row_level_accuracy(gt_seg, est_seg)
        rep.tray_level_acc = tray_level_accuracy(gt_seg, est_seg)
        rep.n_segments = len(gt_seg)
        rep.n_trays = len({k[:-1] for k in gt_seg})
    if truth.counts:
        est_counts = {}
        for (cart, day) in truth.counts:
            pts = points_by_day.get(day, YieldPoints.empty())
            total = float(np.sum(pts.dw[pts.cart_id == cart])) if len(pts) else 0.0
            est_counts[(cart, day)] = tray_count_estimate(total, avg_tray_mass).raw
        cm = tray_count_accuracy(truth.counts, est_counts)
        rep.tray_count_acc, rep.mae, rep.rmse, rep.pearson_r = cm.accuracy, cm.mae, cm.rmse, cm.pearson_r
        rep.ba_mean_diff, rep.ba_lower, rep.ba_upper = (cm.bland_altman.mean_diff, cm.bland_altman.lower,
                                                        cm.bland_altman.upper)
        rep.n_cart_days = cm.n_cart_days
    return rep
