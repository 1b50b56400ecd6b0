"""Stages 2-4: row assignment, travel direction, row-completion and row-occupancy repair.

Row identities are integer indices into ``FieldModel.rows``; -1 means "no row".
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from . import _kernels
from .errors import SeriesTooShort
from .field import FieldModel, nearest_row
from .ingest import CartTrack


@dataclass(frozen=True)
class RowConfig:
    eps: float = 2.0
    min_pts: int = 10
    tau: float = 0.05            # m per s: scales time into the clustering metric
    overlap_threshold: float = 3.0
    hampel_half: int = 5         # 11-sample window
    hampel_sigma: float = 3.0
    prominence: float = 2.0
    gap_cap: float = 1.0         # s; inter-sample intervals are capped when summing time
    smooth_half: int = 25        # along-row running median, 51 samples
    smooth_gap: float = 2.0      # s; a larger gap starts a new smoothing run
    continuity: float = 10.0      # m; a run resuming this close to where the last one stopped continues it
    min_visit: float = 10.0      # s of harvest time below which a row visit is ignored as a neighbour


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def smooth_positions(t: np.ndarray, y: np.ndarray, half: int, gap: float) -> np.ndarray:
    """Running median of ``y`` within runs of samples not separated by more than ``gap`` s."""
    out = np.empty_like(y, dtype=np.float64)
    if y.size == 0:
        return out
    cuts = np.flatnonzero(np.diff(t) > gap) + 1
    for a, b in zip(np.r_[0, cuts], np.r_[cuts, y.size]):
        out[a:b] = _kernels.running_median(y[a:b], half)
    return out


def time_per_row(t: np.ndarray, rows: np.ndarray, cap: float = 1.0) -> dict[int, float]:
    """Harvest time per row: consecutive same-row intervals, each capped at ``cap`` s."""
    if t.size < 2:
        return {int(r): 0.0 for r in np.unique(rows)}
    dt = np.minimum(np.diff(t), cap)
    same = rows[:-1] == rows[1:]
    out = {int(r): 0.0 for r in np.unique(rows)}
    for r in out:
        out[r] = float(dt[same & (rows[:-1] == r)].sum())
    return out


def dominant_direction(d: np.ndarray) -> int:
    return 1 if np.count_nonzero(d > 0) >= np.count_nonzero(d < 0) else -1


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def assign_rows(track: CartTrack, f: FieldModel, eps: float = 2.0, min_pts: int = 10,
                tau: float = 0.05) -> CartTrack:
    """Cluster points in (t*tau, x, y) and snap each cluster to the row nearest its median x.

    Noise points are removed from the returned track. ``cluster`` and ``row``
    columns are set; ``row_new`` starts equal to ``row`` with ``flag`` false.
    """
    track = track.sorted_by_time()
    if len(track) == 0:
        out = track.copy()
        out.cluster = out.row = out.row_new = np.zeros(0, dtype=np.int64)
        out.flag = np.zeros(0, dtype=bool)
        return out
    X = np.column_stack([(track.t - track.t[0]) * tau, track.x, track.y])
    labels = _kernels.dbscan(X, eps, min_pts, 0)
    row = np.full(len(track), -1, dtype=np.int64)
    for lab in np.unique(labels[labels >= 0]):
        m = labels == lab
        row[m] = nearest_row(f, float(np.median(track.x[m])))
    keep = labels >= 0
    out = track.take(keep)
    out.cluster = labels[keep]
    out.row = row[keep]
    out.row_new = out.row.copy()
    out.flag = np.zeros(len(out), dtype=bool)
    return out


# ---------------------------------------------------------------------------
# travel direction
# ---------------------------------------------------------------------------

def _sign(a: float, b: float) -> int:
    return 1 if a - b >= 0 else -1


def _alternate(peaks: np.ndarray, valleys: np.ndarray, y: np.ndarray) -> list[int]:
    """Merge peak and valley indices so kinds alternate, keeping the more extreme of a run."""
    events = sorted([(int(i), 1) for i in peaks] + [(int(i), -1) for i in valleys])
    merged: list[tuple[int, int]] = []
    for idx, kind in events:
        if merged and merged[-1][1] == kind:
            prev = merged[-1][0]
            if (kind == 1 and y[idx] > y[prev]) or (kind == -1 and y[idx] < y[prev]):
                merged[-1] = (idx, kind)
        else:
            merged.append((idx, kind))
    return [i for i, _ in merged]


def travel_direction(y, half: int = 5, n_sigma: float = 3.0, prominence: float = 2.0) -> np.ndarray:
    """Per-sample direction (+1 increasing y, -1 decreasing) from peaks/valleys of the filtered series.

    The breakpoint index opens the following segment and the last segment
    includes the final sample, so the output always has ``len(y)`` entries.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n < 2:
        raise SeriesTooShort(f"travel direction needs at least 2 samples, got {n}")
    yf = _kernels.hampel(y, half, n_sigma)
    peaks, _ = find_peaks(yf, prominence=prominence)
    valleys, _ = find_peaks(-yf, prominence=prominence)

    d = np.empty(n, dtype=np.int8)
    if peaks.size == 0 and valleys.size == 0:
        d[:] = _sign(yf[-1], yf[0])
        return d
    if peaks.size >= 1 and valleys.size >= 1:
        breaks = _alternate(peaks, valleys, yf)
    else:
        # one-sided: a single turning point (the most extreme one)
        pts = peaks if peaks.size else valleys
        ext = pts[np.argmax(yf[pts])] if peaks.size else pts[np.argmin(yf[pts])]
        breaks = [int(ext)]
    bounds = [0] + breaks + [n - 1]
    for a, b in zip(bounds[:-1], bounds[1:]):
        d[a:b] = _sign(yf[b], yf[a])
    d[n - 1] = _sign(yf[bounds[-1]], yf[bounds[-2]])
    return d


# ---------------------------------------------------------------------------
# Stage 3
# ---------------------------------------------------------------------------

def _consecutive_groups(rowset: list[int]) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    s = set(rowset)
    pairs = [(r, r + 1) for r in rowset if r + 1 in s]
    triplets = [(r, r + 1, r + 2) for r in rowset if r + 1 in s and r + 2 in s]
    return pairs, triplets


def _row_directions(track: CartTrack, cfg: RowConfig) -> np.ndarray:
    ys = track.y_s if track.y_s is not None else track.y
    d = np.ones(len(track), dtype=np.int8)
    for r in np.unique(track.row_new):
        m = track.row_new == r
        if m.sum() >= 2:
            d[m] = travel_direction(ys[m], cfg.hampel_half, cfg.hampel_sigma, cfg.prominence)
    return d


def _visits(rows: np.ndarray) -> list[tuple[int, int, int]]:
    """``(row, start, stop)`` for each maximal time-ordered run of one row."""
    if rows.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(rows)) + 1
    return [(int(rows[a]), int(a), int(b)) for a, b in zip(np.r_[0, cuts], np.r_[cuts, rows.size])]


def resolve_row_completion(track: CartTrack, f: FieldModel, cfg: RowConfig = RowConfig()) -> CartTrack:
    """Fold a visit to a neighbouring row back into the row the cart was harvesting.

    Rows are grouped into pairs and triplets of consecutive assigned rows. A
    visit (a time-contiguous run of one row) to a minor row of a group moves
    to the group's major row when the cart came to it straight from that
    major row, travelling the same way, and either

    * returned to the major row right after, with the two major runs holding
      more harvest time than the visit, or
    * picked up within ``continuity`` m of where it left the major row,
      which held more harvest time than the visit.

    Visits shorter than ``min_visit`` seconds are skipped when looking for
    neighbours.

    Runs too short to show a direction (y span below ``prominence``) agree
    with anything. Harvesting neighbouring rows one after the other starts
    each row afresh, so it matches neither case. Only ``row_new``, ``flag``
    and ``direction`` change.
    """
    out = track.sorted_by_time().copy()
    if out.row_new is None:
        raise ValueError("track has no row assignment; run assign_rows first")
    out.row_new = out.row_new.copy()
    out.flag = np.zeros(len(out), dtype=bool) if out.flag is None else out.flag.copy()
    if len(out) == 0:
        out.direction = np.zeros(0, dtype=np.int8)
        return out
    ys = out.y_s if out.y_s is not None else out.y

    pairs, triplets = _consecutive_groups(sorted(int(r) for r in np.unique(out.row)))
    grouped = {frozenset(g) for g in pairs} | {frozenset((g[0], g[2])) for g in triplets}
    visits = _visits(out.row_new)

    def direction(a: int, b: int) -> int:
        if b - a < 2 or np.ptp(ys[a:b]) < cfg.prominence:
            return 0
        return dominant_direction(travel_direction(ys[a:b], cfg.hampel_half, cfg.hampel_sigma, cfg.prominence))

    def harvest_time(a: int, b: int) -> float:
        return float(np.minimum(np.diff(out.t[a:b]), cfg.gap_cap).sum()) if b - a > 1 else 0.0

    def agree(*ds: int) -> bool:
        return len({d for d in ds if d != 0}) <= 1

    dirs = [direction(a, b) for _, a, b in visits]
    times = [harvest_time(a, b) for _, a, b in visits]
    # runs shorter than min_visit are GPS flicker and never act as a neighbour
    sub = [i for i in range(len(visits)) if times[i] >= cfg.min_visit]
    current = [v[0] for v in visits]
    for j in range(1, len(sub)):
        i, p = sub[j], sub[j - 1]
        r, a, _ = visits[i]
        major, pb = current[p], visits[p][2]
        if frozenset((r, major)) not in grouped or not agree(dirs[p], dirs[i]):
            continue
        n = sub[j + 1] if j + 1 < len(sub) else None
        if n is not None and current[n] == major and agree(dirs[i], dirs[n]):
            move = times[i] < times[p] + times[n]
        else:
            move = abs(float(ys[a]) - float(ys[pb - 1])) <= cfg.continuity and times[i] < times[p]
        if move:
            _, a, b = visits[i]
            out.row_new[a:b] = major
            out.flag[a:b] = True
            current[i] = major

    out.direction = _row_directions(out, cfg)
    return out


# ---------------------------------------------------------------------------
# Stage 4
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OccupancyConflict:
    cart_k: str
    cart_l: str
    row: int
    overlap: float
    direction: int = 1


@dataclass
class OccupancyResult:
    tracks: list[CartTrack]
    resolved: list[tuple[OccupancyConflict, str, int]] = field(default_factory=list)
    unresolved: list[OccupancyConflict] = field(default_factory=list)  # NoAvailableRow


def overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def _occupancy(tracks: list[CartTrack]) -> dict[int, list[tuple[str, int, tuple[float, float]]]]:
    """row -> [(cart_id, direction, (y_min, y_max))] from current ``row_new``."""
    occ: dict[int, list] = defaultdict(list)
    for tr in tracks:
        if len(tr) == 0:
            continue
        ys = tr.y_s if tr.y_s is not None else tr.y
        for r in np.unique(tr.row_new):
            m = tr.row_new == r
            d = dominant_direction(tr.direction[m]) if tr.direction is not None else 1
            occ[int(r)].append((tr.cart_id, d, (float(ys[m].min()), float(ys[m].max()))))
    return occ


def detect_occupancy_conflicts(tracks: list[CartTrack], threshold: float = 3.0) -> list[OccupancyConflict]:
    """Same-row, same-direction cart pairs whose y-ranges overlap by more than ``threshold``."""
    found = []
    for r, entries in sorted(_occupancy(tracks).items()):
        entries = sorted(entries)
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                ck, dk, rk = entries[i]
                cl, dl, rl = entries[j]
                if ck == cl or dk != dl:
                    continue
                o = overlap(rk, rl)
                if o > threshold:
                    found.append(OccupancyConflict(ck, cl, r, o, dk))
    return found


def _next_major_row(tr: CartTrack, r: int, cap: float) -> int | None:
    """Neighbouring row (r-1 or r+1) holding most of the cart's initially assigned data."""
    times = time_per_row(tr.t, tr.row, cap)
    cands = [(times.get(n, 0.0), -n, n) for n in (r - 1, r + 1) if times.get(n, 0.0) > 0]
    return max(cands)[2] if cands else None


def resolve_occupancy(tracks: list[CartTrack], conflicts: list[OccupancyConflict], f: FieldModel,
                      cfg: RowConfig = RowConfig()) -> OccupancyResult:
    """Move one cart of each conflicting pair out of the shared row.

    Conflicts are handled in (row, cart_k, cart_l) order against the current
    state; a conflict already dissolved by an earlier move is skipped. Only
    the moved cart's points in the conflict row are reassigned.
    """
    tracks = [tr.copy() for tr in tracks]
    for tr in tracks:
        tr.row_new = tr.row_new.copy()
        tr.flag = tr.flag.copy()
    by_id = {tr.cart_id: tr for tr in tracks}
    result = OccupancyResult(tracks)
    n_rows = f.rows.size

    def yrange(tr, mask):
        ys = tr.y_s if tr.y_s is not None else tr.y
        return float(ys[mask].min()), float(ys[mask].max())

    def available(cand: int, cart: str, span: tuple[float, float]) -> bool:
        if not 0 <= cand < n_rows:
            return False
        for other in tracks:
            if other.cart_id == cart or len(other) == 0:
                continue
            m = other.row_new == cand
            if m.any() and overlap(yrange(other, m), span) > cfg.overlap_threshold:
                return False
        return True

    for c in sorted(conflicts, key=lambda c: (c.row, c.cart_k, c.cart_l)):
        tk, tl = by_id[c.cart_k], by_id[c.cart_l]
        mk, ml = tk.row_new == c.row, tl.row_new == c.row
        if not mk.any() or not ml.any():
            continue
        if overlap(yrange(tk, mk), yrange(tl, ml)) <= cfg.overlap_threshold:
            continue
        adj_k, adj_l = bool(tk.flag[mk].any()), bool(tl.flag[ml].any())
        if adj_k != adj_l:
            mover = tk if adj_k else tl
        else:
            T_k = time_per_row(tk.t, tk.row_new, cfg.gap_cap).get(c.row, 0.0)
            T_l = time_per_row(tl.t, tl.row_new, cfg.gap_cap).get(c.row, 0.0)
            mover = tk if T_k < T_l else tl
        m = mover.row_new == c.row
        span = yrange(mover, m)
        target = _next_major_row(mover, c.row, cfg.gap_cap)
        cands: list[int] = []
        for r in ([target] if target is not None else []) + [c.row - 1, c.row + 1] + (
                [target - 1, target + 1] if target is not None else []):
            if r != c.row and r not in cands:
                cands.append(r)
        for r in cands:
            if available(r, mover.cart_id, span):
                mover.row_new[m] = r
                mover.flag[m] = True
                result.resolved.append((c, mover.cart_id, r))
                break
        else:
            result.unresolved.append(c)
    return result


# ---------------------------------------------------------------------------
# pattern checks
# ---------------------------------------------------------------------------

def sigma(track: CartTrack, t1: float, t2: float, r: int, d: int) -> int:
    """1 if the cart is recorded harvesting row ``r`` in direction ``d`` during [t1, t2]."""
    m = (track.t >= t1) & (track.t <= t2) & (track.row_new == r) & (track.direction == d)
    return int(bool(m.any()))


def row_completion_violations(track: CartTrack) -> list[int]:
    """Clusters whose time window shows the cart in more than one row with the same direction."""
    bad = []
    for lab in np.unique(track.cluster):
        m = track.cluster == lab
        t1, t2 = track.t[m].min(), track.t[m].max()
        w = (track.t >= t1) & (track.t <= t2)
        pairs = {(int(r), int(d)) for r, d in zip(track.row_new[w], track.direction[w])}
        for d in (1, -1):
            total = sum(sigma(track, t1, t2, r, d) for r, dd in pairs if dd == d)
            if total > 1:
                bad.append(int(lab))
                break
    return bad
