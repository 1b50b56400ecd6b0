"""Stages 5-6: mass cleaning, tray separation, per-foot interpolation, gridding.

Yield increments are rounded to multiples of 2**-30 kg. Any sum of such
values below 2**23 kg is exact in float64, so grid totals, season totals and
the sum over yield points agree bit for bit whatever the summation order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import AllFiltered, ConfigError, GridMismatch, YieldError
from .field import GridSpec, nearest_index
from .ingest import CartTrack

FOOT = 0.3048
QUANTUM = 2.0 ** -30
AVG_TRAY_MASS = 4.25


def quantize(v):
    return np.round(np.asarray(v, dtype=np.float64) / QUANTUM) * QUANTUM


# ---------------------------------------------------------------------------
# Stage 5
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MassFilterConfig:
    w_min: float = 0.55
    w_max: float = 5.0
    dw_max: float = 0.5        # kg/s
    median_window: int = 5

    def __post_init__(self):
        if not (0 <= self.w_min < self.w_max):
            raise ConfigError(f"need 0 <= w_min < w_max, got {self.w_min}, {self.w_max}")
        if not self.dw_max > 0:
            raise ConfigError(f"dw_max must be positive, got {self.dw_max}")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ConfigError(f"median_window must be a positive odd count, got {self.median_window}")


def process_mass(t, w, cfg: MassFilterConfig = MassFilterConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Range test, forward-rate test, then running median over the survivors.

    Returns ``(idx, w_filtered)`` where ``idx`` indexes the surviving input
    samples in order. A sample survives the rate test when the rate to the
    next in-range sample is in (0, dw_max], so the last in-range sample never does.
    """
    t = np.asarray(t, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    vi = np.flatnonzero((w > cfg.w_min) & (w < cfg.w_max))
    if vi.size >= 2:
        dt = np.diff(t[vi])
        dw = np.diff(w[vi])
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(dt > 0, dw / np.where(dt > 0, dt, 1.0), np.inf)
        idx = vi[:-1][(rate > 0) & (rate <= cfg.dw_max)]
    else:
        idx = vi[:0]
    if idx.size == 0:
        raise AllFiltered("no mass samples survive the range and rate tests")
    return idx, _kernels.running_median(w[idx], cfg.median_window // 2)


# ---------------------------------------------------------------------------
# Stage 6: trays
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrayConfig:
    eps: float = 1.0
    min_pts: int = 5
    t_scale: float = 0.02      # per s
    w_scale: float = 5.0       # per kg
    link_tol: float = 0.3      # kg
    link_gap: float = 600.0    # s
    link_y_tol: float = 8.0    # m; same-row continuation must resume near where it stopped
    edge: int = 5              # samples used for start/end mass and position


@dataclass(frozen=True)
class TraySegment:
    tray_id: int
    row: int
    idx: np.ndarray  # positions in the track


@dataclass
class _Run:
    row: int
    idx: np.ndarray
    t0: float
    t1: float
    w0: float
    w1: float
    y0: float
    y1: float
    tray: int = -1


def _run(row, idx, t, w, y, k) -> _Run:
    a, b = idx[:k], idx[-k:]
    return _Run(row, idx, float(t[idx[0]]), float(t[idx[-1]]),
                float(np.median(w[a])), float(np.median(w[b])),
                float(np.median(y[a])), float(np.median(y[b])))


def _linked(a: _Run, b: _Run, cfg: TrayConfig, lifted=None) -> bool:
    if b.t0 - a.t1 > cfg.link_gap:
        return False
    if lifted is not None:
        return b.w0 >= a.w1 - cfg.link_tol and not lifted(a.t1, b.t0)
    if a.row == b.row:
        return b.w0 >= a.w1 - cfg.link_tol and abs(b.y0 - a.y1) <= cfg.link_y_tol
    return abs(b.w0 - a.w1) <= cfg.link_tol


def lift_detector(reference: CartTrack, level: float):
    """``lifted(t0, t1)``: did the load cell read below ``level`` (tray off the cart) strictly between t0 and t1?"""
    ref = reference.sorted_by_time()
    low_t = ref.t[ref.mass < level]

    def lifted(t0: float, t1: float) -> bool:
        i = np.searchsorted(low_t, t0, side="right")
        return bool(i < low_t.size and low_t[i] < t1)

    return lifted


def separate_trays(track: CartTrack, cfg: TrayConfig = TrayConfig(), reference: CartTrack | None = None,
                   lift_level: float = 0.275) -> tuple[CartTrack, list[TraySegment]]:
    """Label each point with a tray id; -1 marks clustering noise.

    Clustering runs per row in (y, t, w) space. Runs are then chained in time
    order. Without ``reference`` a run continues the previous tray when the
    mass carries over within ``link_tol`` (and, within one row, the position
    does too). With ``reference`` (the unfiltered calibrated track) a run
    continues the previous tray when the mass did not drop and the load cell
    never fell below ``lift_level`` in between, i.e. the tray stayed on the cart.
    """
    out = track.copy()
    n = len(out)
    out.tray_id = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return out, []
    y = out.y_s if out.y_s is not None else out.y
    w = out.mass_f if out.mass_f is not None else out.mass
    t = out.t
    t0 = float(t.min())
    runs: list[_Run] = []
    for r in np.unique(out.row_new):
        rows_idx = np.flatnonzero(out.row_new == r)
        X = np.column_stack([y[rows_idx], (t[rows_idx] - t0) * cfg.t_scale, w[rows_idx] * cfg.w_scale])
        labels = _kernels.dbscan(X, cfg.eps, cfg.min_pts, 1)
        for lab in np.unique(labels[labels >= 0]):
            idx = rows_idx[labels == lab]
            idx = idx[np.argsort(t[idx], kind="stable")]
            runs.append(_run(int(r), idx, t, w, y, min(cfg.edge, idx.size)))

    runs.sort(key=lambda r: (r.t0, r.row))
    lifted = lift_detector(reference, lift_level) if reference is not None and len(reference) else None
    next_id = 0
    for i, b in enumerate(runs):
        prev = [a for a in runs[:i] if a.t1 <= b.t0 + 1.0]
        a = max(prev, key=lambda a: a.t1) if prev else None
        if a is not None and _linked(a, b, cfg, lifted):
            b.tray = a.tray
        else:
            b.tray = next_id
            next_id += 1
        out.tray_id[b.idx] = b.tray

    groups: dict[tuple[int, int], list[np.ndarray]] = {}
    for r in runs:
        groups.setdefault((r.tray, r.row), []).append(r.idx)
    segments = [TraySegment(k[0], k[1], np.sort(np.concatenate(v))) for k, v in sorted(groups.items())]
    return out, segments


# ---------------------------------------------------------------------------
# Stage 6: interpolation
# ---------------------------------------------------------------------------

class YieldPoint(NamedTuple):
    cart_id: str
    tray_id: int
    row: int
    x_row: float
    y_int: float
    length: float
    dw: float
    segment: int


@dataclass(frozen=True)
class SegmentFit:
    cart_id: str
    tray_id: int
    row: int
    t_start: float
    t_end: float
    y_min: float
    y_max: float
    n: int
    degree: int      # 0 for a degenerate (single-position) segment
    score: float
    confident: bool  # best score reached score_max
    monotone: bool
    total: float


@dataclass
class YieldPoints:
    """Columnar table of yield points; ``segments[k]`` describes the fit behind ``segment == k``."""

    cart_id: np.ndarray
    tray_id: np.ndarray
    row: np.ndarray
    x_row: np.ndarray
    y_int: np.ndarray
    length: np.ndarray
    dw: np.ndarray
    segment: np.ndarray
    segments: list[SegmentFit] = field(default_factory=list)

    def __len__(self):
        return int(self.dw.size)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> YieldPoint:
        return YieldPoint(str(self.cart_id[i]), int(self.tray_id[i]), int(self.row[i]), float(self.x_row[i]),
                          float(self.y_int[i]), float(self.length[i]), float(self.dw[i]), int(self.segment[i]))

    @classmethod
    def empty(cls) -> "YieldPoints":
        i, f = np.zeros(0, dtype=np.int64), np.zeros(0)
        return cls(np.zeros(0, dtype=object), i, i.copy(), f, f.copy(), f.copy(), f.copy(), i.copy())

    @classmethod
    def from_points(cls, points, segments=()) -> "YieldPoints":
        pts = list(points)
        if not pts:
            out = cls.empty()
            out.segments = list(segments)
            return out
        cols = list(zip(*pts))
        return cls(np.array(cols[0], dtype=object), np.array(cols[1], dtype=np.int64),
                   np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=np.float64),
                   np.array(cols[4], dtype=np.float64), np.array(cols[5], dtype=np.float64),
                   np.array(cols[6], dtype=np.float64), np.array(cols[7], dtype=np.int64), list(segments))

    @classmethod
    def concat(cls, parts) -> "YieldPoints":
        parts = [p for p in parts if p is not None]
        if not parts:
            return cls.empty()
        segs: list[SegmentFit] = []
        seg_cols = []
        for p in parts:
            seg_cols.append(p.segment + len(segs))
            segs.extend(p.segments)
        cat = np.concatenate
        return cls(cat([p.cart_id for p in parts]).astype(object), cat([p.tray_id for p in parts]),
                   cat([p.row for p in parts]), cat([p.x_row for p in parts]), cat([p.y_int for p in parts]),
                   cat([p.length for p in parts]), cat([p.dw for p in parts]), cat(seg_cols), segs)

    def total(self) -> float:
        return float(np.sum(self.dw))


def _r2(w, pred) -> float:
    ss_tot = float(np.sum((w - w.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - float(np.sum((w - pred) ** 2)) / ss_tot


def fit_mass_profile(y, w, score_max: float = 0.94):
    """Lowest polynomial degree (1..3) whose R^2 reaches ``score_max``, else the best one.

    Returns ``(poly, degree, score)``; degrees needing more distinct positions
    than available are skipped.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    distinct = np.unique(y).size
    if distinct < 2:
        raise YieldError("need at least two distinct positions to fit")
    best = None
    for deg in range(1, min(3, distinct - 1) + 1):
        poly = np.polynomial.Polynomial.fit(y, w, deg)
        score = _r2(w, poly(y))
        if score >= score_max:
            return poly, deg, score
        if best is None or score > best[2]:
            best = (poly, deg, score)
    return best


def sample_positions(y_min: float, y_max: float, interval: float = FOOT) -> np.ndarray:
    """y_min, y_min + interval, ... up to y_max, with a final partial step ending at y_max."""
    n = int(np.floor((y_max - y_min) / interval + 1e-9))
    grid = y_min + interval * np.arange(n + 1, dtype=np.float64)
    if y_max - grid[-1] > 1e-9:
        grid = np.append(grid, y_max)
    return grid


def interpolate_segment(y, w, interval: float = FOOT, score_max: float = 0.94, rise: float | None = None,
                        anchors=()):
    """Yield increments for one tray/row segment.

    Returns ``(y_int, length, dw, degree, score, monotone)``. Predictions are
    clipped to the observed mass range so an extended or noisy span cannot
    create mass the load cell never recorded. When ``rise`` is given the
    increments are rescaled to sum to it: the fit decides where along the row
    the mass went, the load cell decides how much. ``anchors`` are extra
    ``(y, w)`` points that widen the span. A segment with a single position
    deposits its whole mass rise there.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if len(anchors):
        ay, aw = np.asarray(anchors, dtype=np.float64).reshape(-1, 2).T
        y, w = np.concatenate([y, ay]), np.concatenate([w, aw])
    if np.unique(y).size < 2:
        r = (float(w.max() - w.min()) if w.size else 0.0) if rise is None else rise
        return (np.array([float(y[0])]), np.array([0.0]), quantize([r]), 0, 1.0, True)
    poly, deg, score = fit_mass_profile(y, w, score_max)
    grid = sample_positions(float(y.min()), float(y.max()), interval)
    pred = np.clip(poly(grid), w.min(), w.max())
    steps = np.diff(pred)
    monotone = bool(np.all(steps >= 0) or np.all(steps <= 0))
    inc = np.abs(steps)
    if rise is not None:
        total = float(inc.sum())
        lengths = np.diff(grid)
        inc = inc * (rise / total) if total > 0 else lengths * (rise / float(lengths.sum()))
    return grid[:-1], np.diff(grid), quantize(inc), deg, score, monotone


@dataclass(frozen=True)
class SegmentLevels:
    """Tray mass before and after one segment, and where the rise began/ended if outside the kept samples."""

    start: float
    end: float
    y_start: float | None = None
    y_end: float | None = None

    @property
    def rise(self) -> float:
        return self.end - self.start


def _stretch(t, lo: float, hi: float) -> np.ndarray:
    return np.arange(np.searchsorted(t, lo, side="right"), np.searchsorted(t, hi, side="left"))


def _local_median(v: np.ndarray, i: int, half: int) -> float:
    return float(np.median(v[max(0, i - half):i + half + 1]))


def segment_levels(track: CartTrack, segments: list[TraySegment], reference: CartTrack | None = None,
                   lift_level: float = 0.275, w_max: float = 5.0, horizon: float = 180.0, min_samples: int = 5,
                   tol: float = 0.05, y_half: int = 25, settle: float = 1.0) -> list[SegmentLevels]:
    """Tray levels around each segment, chained along each tray in time order.

    Levels come from ``reference`` (the cart's calibrated track before any
    filtering) when given. The median reading between a segment's last
    sample and the next segment or tray lift, at most ``horizon`` s later, is
    the level the segment ended at (a reading below ``lift_level`` means the
    tray came off the cart and ends the stretch; the level is then read
    from the last few seconds before the lift, so the tray's final total
    includes everything it carried). A tray's starting level is
    read from the first few seconds (after ``settle`` s) of the stretch before
    its first segment, which begins when the tray was placed if that is
    within ``horizon``. This recovers deposits that the
    activity filter cut off together with the window around them, and the
    positions (median of ``2*y_half+1`` reference fixes) where the tray
    actually started and finished rising. Without a usable stretch the
    filtered mass's extremes stand in.
    """
    w = track.mass_f if track.mass_f is not None else track.mass
    n = len(segments)
    if n == 0:
        return []
    span = [(float(track.t[s.idx].min()), float(track.t[s.idx].max())) for s in segments]
    by_time = sorted(range(n), key=lambda k: (span[k][0], segments[k].row))
    nxt = {k: span[by_time[i + 1]][0] if i + 1 < n else np.inf for i, k in enumerate(by_time)}
    prv = {k: span[by_time[i - 1]][1] if i > 0 else -np.inf for i, k in enumerate(by_time)}
    ref = None
    if reference is not None and len(reference):
        ref = reference.sorted_by_time()

    out: list[SegmentLevels | None] = [None] * n
    level: dict[int, float] = {}
    for k in sorted(range(n), key=lambda k: (segments[k].tray_id, span[k][0], segments[k].row)):
        seg = segments[k]
        ws = w[seg.idx]
        t0, t1 = span[k]
        tail = float(np.median(ws[-min(min_samples, ws.size):]))
        start = level.get(seg.tray_id)
        first = start is None
        end = None
        y0 = y1 = None
        if ref is not None:
            before = _stretch(ref.t, max(t0 - horizon, prv[k]), t0)
            lifted = np.flatnonzero(ref.mass[before] < lift_level)
            if lifted.size:
                before = before[lifted[-1] + 1:]
            before = before[ref.mass[before] < w_max]
            if first and before.size >= min_samples:
                tb = ref.t[before]
                early = before[(tb >= tb[0] + settle) & (tb <= tb[0] + settle + 5.0)]
                start = float(np.median(ref.mass[early if early.size >= min_samples else before]))
            after = _stretch(ref.t, t1, min(t1 + horizon, nxt[k]))
            lifted = np.flatnonzero(ref.mass[after] < lift_level)
            last = None
            if lifted.size:
                t_lift = ref.t[after[lifted[0]]]
                after = after[:lifted[0]]
                ta = ref.t[after]
                last = after[(ta >= t_lift - settle - 5.0) & (ta <= t_lift - settle)]
            after = after[ref.mass[after] < w_max]
            if last is not None:
                last = last[ref.mass[last] < w_max]
            if after.size >= min_samples:
                level_idx = last if last is not None and last.size >= min_samples else after
                end = max(float(np.median(ref.mass[level_idx])), tail)
                hit = np.flatnonzero(ref.mass[after] >= end - tol)
                if hit.size and hit[0] > 0:
                    y1 = _local_median(ref.y, int(after[hit[0]]), y_half)
            if start is not None and before.size:
                low = np.flatnonzero(ref.mass[before] <= start + tol)
                if low.size and low[-1] < before.size - 1:
                    y0 = _local_median(ref.y, int(before[low[-1]]), y_half)
        if first:
            start = float(ws.min()) if start is None else min(start, float(ws.min()))
        end = float(ws.max()) if end is None else end
        end = max(start, end)
        out[k] = SegmentLevels(start, end, y0, y1)
        level[seg.tray_id] = end
    return out


def segment_rises(track: CartTrack, segments: list[TraySegment], reference: CartTrack | None = None,
                  lift_level: float = 0.275, w_max: float = 5.0) -> list[float]:
    return [lv.rise for lv in segment_levels(track, segments, reference, lift_level, w_max)]


def trim_plateaus(w: np.ndarray, tol: float = 0.05) -> slice:
    """Slice of a time-ordered segment from the end of its leading flat stretch to where it first tops out.

    Samples logged while the tray sat at its starting or final level (walking
    in, carrying out) carry no information about where berries were picked.
    """
    if w.size < 3:
        return slice(0, w.size)
    lo = np.flatnonzero(w <= w.min() + tol)
    hi = np.flatnonzero(w >= w.max() - tol)
    a, b = int(lo[lo < hi[0]][-1]) if np.any(lo < hi[0]) else 0, int(hi[0])
    if b - a < 1:
        return slice(0, w.size)
    return slice(a, b + 1)


def _anchors(ys: np.ndarray, lv: SegmentLevels) -> list[tuple[float, float]]:
    """Keep the start/end positions only when they lie beyond the kept samples on the right side."""
    k = min(5, ys.size)
    sense = np.sign(np.median(ys[-k:]) - np.median(ys[:k]))
    if sense == 0:
        return []
    lo, hi = (ys.min(), ys.max()) if sense > 0 else (ys.max(), ys.min())
    out = []
    if lv.y_start is not None and sense * (lo - lv.y_start) > 0:
        out.append((lv.y_start, lv.start))
    if lv.y_end is not None and sense * (lv.y_end - hi) > 0:
        out.append((lv.y_end, lv.end))
    return out


def interpolate_yield(track: CartTrack, segments: list[TraySegment], row_x: np.ndarray,
                      interval: float = FOOT, score_max: float = 0.94, conserve: bool = True,
                      reference: CartTrack | None = None, mass_cfg: "MassFilterConfig | None" = None) -> YieldPoints:
    """Per-foot yield points for every tray/row segment of one cart.

    With ``conserve`` each segment's increments sum to its chained mass rise
    and its span reaches the positions where the rise began and ended (see
    :func:`segment_levels`, which reads both from ``reference``); without it
    the increments are the raw fitted steps over the kept samples.
    """
    y = track.y_s if track.y_s is not None else track.y
    w = track.mass_f if track.mass_f is not None else track.mass
    mc = mass_cfg or MassFilterConfig()
    levels = segment_levels(track, segments, reference, mc.w_min / 2, mc.w_max) if conserve else [None] * len(segments)
    points: list[YieldPoint] = []
    fits: list[SegmentFit] = []
    for seg, lv in zip(segments, levels):
        ys, ws = y[seg.idx], w[seg.idx]
        keep = trim_plateaus(ws)
        ys, ws = ys[keep], ws[keep]
        if lv is None:
            res = interpolate_segment(ys, ws, interval, score_max)
        else:
            res = interpolate_segment(ys, ws, interval, score_max, lv.rise, _anchors(ys, lv))
        y_int, length, dw, deg, score, mono = res
        k = len(fits)
        fits.append(SegmentFit(track.cart_id, seg.tray_id, seg.row, float(track.t[seg.idx].min()),
                               float(track.t[seg.idx].max()), float(ys.min()), float(ys.max()), int(seg.idx.size),
                               deg, float(score), bool(score >= score_max), mono, float(dw.sum())))
        xr = float(row_x[seg.row])
        points.extend(YieldPoint(track.cart_id, seg.tray_id, seg.row, xr, float(a), float(b), float(c), k)
                      for a, b, c in zip(y_int, length, dw))
    return YieldPoints.from_points(points, fits)


# ---------------------------------------------------------------------------
# Stage 6: grid
# ---------------------------------------------------------------------------

@dataclass
class YieldGrid:
    grid: GridSpec
    mass: np.ndarray                       # (nx, ny) kg
    days: tuple[str, ...] = ()
    cart_ids: tuple[str, ...] = ()

    @property
    def cart_count(self) -> int:
        return len(self.cart_ids)

    def total(self) -> float:
        return float(self.mass.sum())


def grid_yield(points: YieldPoints, g: GridSpec, day: str = "") -> YieldGrid:
    """Sum each point's increment into the cell whose midpoints are nearest (lower index on ties)."""
    mass = np.zeros(g.shape, dtype=np.float64)
    if len(points):
        ix = nearest_index(g.x_mid, points.x_row)
        iy = nearest_index(g.y_mid, points.y_int)
        np.add.at(mass, (ix, iy), points.dw)
    carts = tuple(sorted({str(c) for c in points.cart_id}))
    return YieldGrid(g, mass, (day,) if day else (), carts)


def accumulate_season(daily: list[YieldGrid]) -> YieldGrid:
    if not daily:
        raise YieldError("no daily grids to accumulate")
    g = daily[0].grid
    for d in daily[1:]:
        if not d.grid.same_as(g):
            raise GridMismatch("daily grids have different cell layouts")
    mass = np.zeros(g.shape, dtype=np.float64)
    days: list[str] = []
    carts: set[str] = set()
    for d in daily:
        mass += d.mass
        days.extend(d.days)
        carts.update(d.cart_ids)
    return YieldGrid(g, mass, tuple(days), tuple(sorted(carts)))


ZERO, VERY_LOW, BELOW_AVG, ABOVE_AVG, VERY_HIGH = "zero", "very-low", "below-avg", "above-avg", "very-high"


@dataclass(frozen=True)
class CellClasses:
    category: np.ndarray     # same shape as the grid, strings
    mu: float
    sigma: float
    zero_fraction: float


def classify_cells(grid: YieldGrid) -> CellClasses:
    """Four bands around the mean of the nonzero cells; zero cells get their own label.

    Bands: (-inf, mu-s], (mu-s, mu], (mu, mu+s], (mu+s, inf) with ``s`` the
    population standard deviation. When s == 0 every nonzero cell is above-avg.
    """
    m = grid.mass
    nz = m > 0
    if np.count_nonzero(nz) < 2:
        raise YieldError("need at least two nonzero cells to classify")
    vals = m[nz]
    mu = float(vals.mean())
    sd = float(vals.std())
    cat = np.full(m.shape, ZERO, dtype=object)
    if sd == 0.0:
        cat[nz] = ABOVE_AVG
    else:
        cat[nz & (m <= mu - sd)] = VERY_LOW
        cat[nz & (m > mu - sd) & (m <= mu)] = BELOW_AVG
        cat[nz & (m > mu) & (m <= mu + sd)] = ABOVE_AVG
        cat[nz & (m > mu + sd)] = VERY_HIGH
    return CellClasses(cat, mu, sd, float(1.0 - np.count_nonzero(nz) / m.size))


