"""End-to-end day processing with every intermediate stage written out for audit.

Stages, in order:

1. activity filter (picking windows) and field-boundary clip
2. spatiotemporal clustering and row snapping
3. row-completion correction, per cart
4. row-occupancy correction across carts (waits for every cart's stage 3)
5. load-cell range/rate filtering and smoothing
6. tray separation, per-foot interpolation, gridding

``process_day`` works in memory; ``run_pipeline`` adds file input and output.
Output files are written to a staging directory that replaces ``out`` only
once every stage has succeeded.
"""
from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import kvfile
from .activity import BaselineClassifier, filter_boundary, filter_picking
from .errors import AllFiltered, ConfigError, CartYieldError, IngestError, YieldError
from .evaluation import GroundTruth, MetricReport, evaluate, read_tray_counts, read_tray_events
from .field import FieldModel, GridSpec, load_field, make_grid
from .ingest import CartTrack, build_track, load_calibration, parse_raw_log
from .rows import (OccupancyResult, RowConfig, assign_rows, detect_occupancy_conflicts, resolve_occupancy,
                   resolve_row_completion, smooth_positions)
from .yields import (AVG_TRAY_MASS, FOOT, MassFilterConfig, TrayConfig, YieldGrid, YieldPoints, classify_cells,
                     grid_yield, interpolate_yield, process_mass, separate_trays)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    # inputs and outputs
    field: str = "field.txt"
    logs: str = "logs"
    calibration: str = "calibration"
    truth: str = ""                    # directory with tray_events.csv / tray_counts.csv, optional
    out: str = "out"
    day: str = "day01"
    seed: int = 0                      # recorded for provenance; processing itself draws no random numbers
    resolution: float = 3.0            # grid cell size, m
    # stage 1
    window: int = 100
    m_step: float = 0.1
    a_max_var: float = 4.0
    # stages 2-4
    eps_rows: float = 2.0
    min_pts_rows: int = 10
    tau: float = 0.05
    overlap_threshold: float = 3.0
    hampel_half: int = 5
    hampel_sigma: float = 3.0
    prominence: float = 2.0
    gap_cap: float = 1.0
    smooth_half: int = 25
    smooth_gap: float = 2.0
    continuity: float = 10.0
    min_visit: float = 10.0
    # stage 5
    w_min: float = 0.55
    w_max: float = 5.0
    dw_max: float = 0.5
    median_window: int = 5
    # stage 6
    eps_trays: float = 1.0
    min_pts_trays: int = 5
    t_scale: float = 0.02
    w_scale: float = 5.0
    link_tol: float = 0.3
    link_gap: float = 600.0
    link_y_tol: float = 8.0
    score_max: float = 0.94
    interval: float = FOOT
    avg_tray_mass: float = AVG_TRAY_MASS

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be at least one sample")
        if not self.interval > 0:
            raise ConfigError("interval must be positive")
        if not 0 < self.score_max <= 1:
            raise ConfigError("score_max must lie in (0, 1]")

    def classifier(self) -> BaselineClassifier:
        return BaselineClassifier(self.m_step, self.a_max_var)

    def rows(self) -> RowConfig:
        return RowConfig(self.eps_rows, self.min_pts_rows, self.tau, self.overlap_threshold, self.hampel_half,
                         self.hampel_sigma, self.prominence, self.gap_cap, self.smooth_half, self.smooth_gap,
                         self.continuity, self.min_visit)

    def mass(self) -> MassFilterConfig:
        return MassFilterConfig(self.w_min, self.w_max, self.dw_max, self.median_window)

    def trays(self) -> TrayConfig:
        return TrayConfig(self.eps_trays, self.min_pts_trays, self.t_scale, self.w_scale, self.link_tol,
                          self.link_gap, self.link_y_tol)

    def to_kv(self) -> str:
        return kvfile.dataclass_to_kv(self, header="pipeline configuration")

    @classmethod
    def from_kv(cls, text: str, **overrides) -> "PipelineConfig":
        return kvfile.dataclass_from_kv(cls, kvfile.parse_kv(text), overrides)

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_kv(fh.read(), **overrides)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read pipeline config {path}: {exc}") from exc


@dataclass
class DayResult:
    day: str
    stage1: dict[str, CartTrack]
    stage3: dict[str, CartTrack]
    occupancy: OccupancyResult
    stage4: dict[str, CartTrack]
    stage5: dict[str, CartTrack]
    points: YieldPoints
    grid: YieldGrid
    warnings: list[str] = field(default_factory=list)


def _empty_annotated(tr: CartTrack) -> CartTrack:
    out = tr.take(np.zeros(0, dtype=np.int64))
    z = np.zeros(0, dtype=np.int64)
    out.y_s = np.zeros(0)
    out.cluster, out.row, out.row_new = z, z.copy(), z.copy()
    out.flag = np.zeros(0, dtype=bool)
    out.direction = np.zeros(0, dtype=np.int8)
    return out


def process_day(tracks: dict[str, CartTrack], f: FieldModel, cfg: PipelineConfig = PipelineConfig(),
                grid: GridSpec | None = None) -> DayResult:
    """Run stages 1-6 on one day's tracks (keyed by cart id)."""
    rc = cfg.rows()
    warnings: list[str] = []
    carts = sorted(tracks)

    stage1: dict[str, CartTrack] = {}
    stage3: dict[str, CartTrack] = {}
    for c in carts:
        tr = filter_boundary(filter_picking(tracks[c].sorted_by_time(), cfg.classifier(), cfg.window), f)
        tr.y_s = smooth_positions(tr.t, tr.y, rc.smooth_half, rc.smooth_gap)
        stage1[c] = tr
        if len(tr) == 0:
            warnings.append(f"{c}: no picking samples")
            stage3[c] = _empty_annotated(tr)
            continue
        stage3[c] = resolve_row_completion(assign_rows(tr, f, rc.eps, rc.min_pts, rc.tau), f, rc)

    # barrier: occupancy needs every cart
    live = [stage3[c] for c in carts if len(stage3[c])]
    conflicts = detect_occupancy_conflicts(live, rc.overlap_threshold)
    occ = resolve_occupancy(live, conflicts, f, rc)
    for cf in occ.unresolved:
        warnings.append(f"row {cf.row}: {cf.cart_k}/{cf.cart_l} overlap {cf.overlap:.1f} m left unresolved")
    stage4 = {c: stage3[c] for c in carts}
    stage4.update({tr.cart_id: tr for tr in occ.tracks})

    stage5: dict[str, CartTrack] = {}
    parts: list[YieldPoints] = []
    mc, tc = cfg.mass(), cfg.trays()
    for c in carts:
        tr = stage4[c]
        try:
            idx, wf = process_mass(tr.t, tr.mass, mc)
        except AllFiltered:
            if len(tr):
                warnings.append(f"{c}: every mass sample filtered out")
            stage5[c] = tr.take(np.zeros(0, dtype=np.int64))
            stage5[c].mass_f = np.zeros(0)
            continue
        t5 = tr.take(idx)
        t5.mass_f = wf
        ref = tracks[c].sorted_by_time()
        t5, segments = separate_trays(t5, tc, ref, cfg.w_min / 2)
        stage5[c] = t5
        parts.append(interpolate_yield(t5, segments, f.rows, cfg.interval, cfg.score_max, reference=ref, mass_cfg=mc))

    points = YieldPoints.concat(parts)
    g = grid if grid is not None else make_grid(f, cfg.resolution)
    return DayResult(cfg.day, stage1, stage3, occ, stage4, stage5, points, grid_yield(points, g, cfg.day), warnings)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _r(v) -> str:
    return float.__repr__(float(v))


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")


def write_stage1(path, tracks: dict[str, CartTrack]) -> None:
    _write_csv(path, "cart_id,src,t,x,y,y_s,mass", (
        (c, str(int(s)), _r(t), _r(x), _r(y), _r(ys), _r(m))
        for c in sorted(tracks) for s, t, x, y, ys, m in
        zip(tracks[c].src, tracks[c].t, tracks[c].x, tracks[c].y, tracks[c].y_s, tracks[c].mass)))


def write_day_table(path, tracks: dict[str, CartTrack], f: FieldModel) -> None:
    """Row-assignment table: original and corrected row centre for each retained point."""
    _write_csv(path, "cart_id,x,y,t,x_row,x_row_new,flag,direction", (
        (c, _r(x), _r(y), _r(t), _r(f.rows[r]), _r(f.rows[rn]), str(int(fl)), str(int(d)))
        for c in sorted(tracks) for x, y, t, r, rn, fl, d in
        zip(tracks[c].x, tracks[c].y, tracks[c].t, tracks[c].row, tracks[c].row_new, tracks[c].flag,
            tracks[c].direction)))


def write_conflicts(path, occ: OccupancyResult) -> None:
    rows = [(str(c.row), c.cart_k, c.cart_l, _r(c.overlap), str(c.direction), mover, str(new))
            for c, mover, new in occ.resolved]
    rows += [(str(c.row), c.cart_k, c.cart_l, _r(c.overlap), str(c.direction), "", "")
             for c in occ.unresolved]
    _write_csv(path, "row,cart_k,cart_l,overlap,direction,moved_cart,new_row", rows)


def write_stage5(path, tracks: dict[str, CartTrack]) -> None:
    _write_csv(path, "cart_id,src,t,row,y_s,mass,mass_f,tray_id", (
        (c, str(int(s)), _r(t), str(int(r)), _r(ys), _r(m), _r(mf), str(int(k)))
        for c in sorted(tracks) if len(tracks[c]) for s, t, r, ys, m, mf, k in
        zip(tracks[c].src, tracks[c].t, tracks[c].row_new, tracks[c].y_s, tracks[c].mass, tracks[c].mass_f,
            tracks[c].tray_id)))


YIELD_HEADER = "cart_id,tray_id,row,x_row,y_int,length,dw,segment"


def write_yield_points(path, points: YieldPoints) -> None:
    _write_csv(path, YIELD_HEADER, (
        (p.cart_id, str(p.tray_id), str(p.row), _r(p.x_row), _r(p.y_int), _r(p.length), _r(p.dw), str(p.segment))
        for p in points))


def read_yield_points(path) -> YieldPoints:
    from .yields import YieldPoint

    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != YIELD_HEADER:
            raise IngestError(f"{path}: not a yield-point file")
        pts = []
        for line in fh:
            c, tr, r, xr, yi, ln, dw, sg = line.rstrip("\n").split(",")
            pts.append(YieldPoint(c, int(tr), int(r), float(xr), float(yi), float(ln), float(dw), int(sg)))
    return YieldPoints.from_points(pts)


def write_segments(path, points: YieldPoints) -> None:
    _write_csv(path, "cart_id,tray_id,row,t_start,t_end,y_min,y_max,n,degree,score,confident,monotone,total", (
        (s.cart_id, str(s.tray_id), str(s.row), _r(s.t_start), _r(s.t_end), _r(s.y_min), _r(s.y_max), str(s.n),
         str(s.degree), _r(s.score), str(int(s.confident)), str(int(s.monotone)), _r(s.total))
        for s in points.segments))


def write_grid(path, g: YieldGrid) -> None:
    items = [
        ("resolution", _r(g.grid.resolution)),
        ("x_edges", ", ".join(_r(v) for v in g.grid.x_edges)),
        ("y_edges", ", ".join(_r(v) for v in g.grid.y_edges)),
        ("truncated", f"{int(g.grid.truncated_x)}, {int(g.grid.truncated_y)}"),
        ("days", ", ".join(g.days)),
        ("carts", ", ".join(g.cart_ids)),
    ]
    items += [("mass", ", ".join(_r(v) for v in col)) for col in g.mass]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(kvfile.format_kv(items, header="yield grid, kg per cell; one 'mass' line per x column"))


def read_grid(path) -> YieldGrid:
    try:
        doc = kvfile.read_kv(path)
        tx, ty = (bool(int(v)) for v in kvfile.single(doc, "truncated").split(","))
        spec = GridSpec(float(kvfile.single(doc, "resolution")), np.array(kvfile.floats(kvfile.single(doc, "x_edges"))),
                        np.array(kvfile.floats(kvfile.single(doc, "y_edges"))), tx, ty)
        mass = np.array([kvfile.floats(v) for v in doc["mass"]], dtype=np.float64).reshape(spec.shape)
        names = lambda k: tuple(v.strip() for v in kvfile.single(doc, k, "").split(",") if v.strip())
        return YieldGrid(spec, mass, names("days"), names("carts"))
    except (OSError, KeyError, ValueError) as exc:
        raise IngestError(f"cannot read grid {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# file-level driver
# ---------------------------------------------------------------------------

ARTIFACTS = ("config.txt", "ingest_skipped.csv", "stage1_tracks.csv", "stage3_rows.csv", "stage4_conflicts.csv",
             "stage4_rows.csv", "stage5_mass.csv", "yield_points.csv", "segments.csv", "grid.txt", "warnings.txt")


def load_tracks(cfg: PipelineConfig, f: FieldModel) -> tuple[dict[str, CartTrack], dict[str, list[int]]]:
    if not os.path.isdir(cfg.logs):
        raise IngestError(f"log directory not found: {cfg.logs}")
    names = sorted(n for n in os.listdir(cfg.logs) if n.endswith(".csv"))
    if not names:
        raise IngestError(f"no .csv logs in {cfg.logs}")
    tracks, skipped = {}, {}
    transform = f.transform()
    for n in names:
        cid = n[:-4]
        cal_path = os.path.join(cfg.calibration, cid + ".txt")
        if not os.path.exists(cal_path):
            raise IngestError(f"calibration file not found: {cal_path}")
        parsed = parse_raw_log(os.path.join(cfg.logs, n))
        tracks[cid] = build_track(parsed.records, load_calibration(cal_path), transform, cid)
        skipped[cid] = parsed.skipped
    return tracks, skipped


def load_truth(directory) -> GroundTruth:
    return GroundTruth(read_tray_events(os.path.join(directory, "tray_events.csv")),
                       read_tray_counts(os.path.join(directory, "tray_counts.csv")))


def zero_fraction(g: YieldGrid) -> float:
    try:
        return classify_cells(g).zero_fraction
    except YieldError:
        return float(np.mean(g.mass == 0)) if g.mass.size else float("nan")


def run_pipeline(cfg: PipelineConfig) -> tuple[DayResult, MetricReport | None]:
    """Process one day from files and write every stage into ``cfg.out``."""
    f = load_field(cfg.field)              # raises before anything is written
    tracks, skipped = load_tracks(cfg, f)
    truth = load_truth(cfg.truth) if cfg.truth else None
    res = process_day(tracks, f, cfg)
    report = None
    if truth is not None:
        report = evaluate({cfg.day: res.points}, truth, zero_fraction(res.grid), cfg.avg_tray_mass)

    out = os.path.abspath(cfg.out)
    stage = out + ".partial"
    if os.path.exists(stage):
        shutil.rmtree(stage)
    os.makedirs(stage)
    try:
        with open(os.path.join(stage, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_kv())
        _write_csv(os.path.join(stage, "ingest_skipped.csv"), "cart_id,line",
                   ((c, str(n)) for c in sorted(skipped) for n in skipped[c]))
        write_stage1(os.path.join(stage, "stage1_tracks.csv"), res.stage1)
        write_day_table(os.path.join(stage, "stage3_rows.csv"), res.stage3, f)
        write_conflicts(os.path.join(stage, "stage4_conflicts.csv"), res.occupancy)
        write_day_table(os.path.join(stage, "stage4_rows.csv"), res.stage4, f)
        write_stage5(os.path.join(stage, "stage5_mass.csv"), res.stage5)
        write_yield_points(os.path.join(stage, "yield_points.csv"), res.points)
        write_segments(os.path.join(stage, "segments.csv"), res.points)
        write_grid(os.path.join(stage, "grid.txt"), res.grid)
        with open(os.path.join(stage, "warnings.txt"), "w", encoding="utf-8") as fh:
            fh.writelines(w + "\n" for w in res.warnings)
        if report is not None:
            with open(os.path.join(stage, "metrics.txt"), "w", encoding="utf-8") as fh:
                fh.write(report.to_kv())
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if os.path.exists(out):
        shutil.rmtree(out)
    os.replace(stage, out)
    for w in res.warnings:
        log.warning("%s: %s", cfg.day, w)
    return res, report


__all__ = ["ARTIFACTS", "CartYieldError", "DayResult", "PipelineConfig", "load_tracks", "load_truth", "process_day",
           "read_grid", "read_yield_points", "run_pipeline", "write_grid", "write_yield_points", "zero_fraction"]
