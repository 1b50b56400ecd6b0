"""Harvest-day simulator: picker state machine, tray fills, sensor noise, ground truth.

Field layout: ``n_rows`` parallel rows along +y, each ``row_length`` long and
harvested in two sections. Lower-section tasks start mid-row and move toward
y = 0; upper-section tasks start mid-row and move toward y = row_length. The
crew takes tasks from one queue (lower rows left to right, then upper rows
right to left), the earliest-free picker first.

Picker states and legal transitions (:data:`TRANSITIONS`)::

    start -> setup -> walk-empty-tray-headland -> walk-empty-tray-row -> picking
    picking -> transp-full-tray-row -> transp-full-tray-headland -> idle-in-queue
    picking -> walk-to-next-row -> picking
    idle-in-queue -> setup | stop

Berries picked along the row go into the picker's hand and are deposited on
the tray in batches; each deposit ramps the load cell over one to two
seconds. Per-foot truth records where berries were picked, so it sums to
each tray's net mass exactly.
"""
from __future__ import annotations

import heapq
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import kvfile
from .errors import ConfigError, InfeasibleConfig
from .evaluation import TraySegmentTruth, write_tray_counts, write_tray_events
from .field import EARTH_RADIUS_M, FieldModel, save_field
from .ingest import (COLUMNS, Calibration, CartTrack, RawRecord, build_track_columns, save_calibration,
                     serialize_logs)
from .yields import FOOT

STATES = ("start", "idle-in-queue", "walk-empty-tray-headland", "walk-empty-tray-row", "picking",
          "walk-to-next-row", "setup", "transp-full-tray-row", "transp-full-tray-headland", "stop")
S = {name: i for i, name in enumerate(STATES)}
TRANSITIONS = {
    "start": {"setup"},
    "setup": {"walk-empty-tray-headland"},
    "walk-empty-tray-headland": {"walk-empty-tray-row"},
    "walk-empty-tray-row": {"picking"},
    "picking": {"transp-full-tray-row", "walk-to-next-row"},
    "walk-to-next-row": {"picking"},
    "transp-full-tray-row": {"transp-full-tray-headland"},
    "transp-full-tray-headland": {"idle-in-queue"},
    "idle-in-queue": {"setup", "stop"},
    "stop": set(),
}

CEP_TO_SIGMA = 1.1774  # CEP = sqrt(2 ln 2) * sigma for a circular Gaussian
DT = 0.1
EPOCH = 1714550400.0  # 2024-05-01 08:00 UTC
MIN_FLANK = 20.0  # s; shortest true-row pass on either side of an injected deviation
GPS_UNIX_OFFSET = 315964800.0 - 18.0


def cep_to_sigma(cep: float) -> float:
    return cep / CEP_TO_SIGMA


@dataclass(frozen=True)
class SimConfig:
    # field
    n_rows: int = 24
    row_spacing: float = 1.22
    row_length: float = 40.0
    heading_deg: float = 20.0
    origin_lat: float = 36.75
    origin_lon: float = -121.65
    # crew and yield
    crew: int = 4
    quota: tuple[float, float] = (8.0, 14.0)          # full trays per picker-day
    density: float = 0.5                               # kg per m of row
    density_amp: float = 0.3
    density_wavelength: tuple[float, float] = (9.0, 23.0)
    day_variation: float = 0.1
    dead_zone: tuple[float, ...] = ()                  # x0, y0, x1, y1 (local m); empty for none
    dead_factor: float = 0.2
    # motion
    pick_speed: tuple[float, float] = (0.12, 0.18)    # m/s
    walk_speed: float = 1.0
    carry_speed: float = 0.8
    sway: float = 0.1                                  # lateral wander amplitude, m
    headland: float = 1.5
    station_offset: float = 4.0
    service_time: tuple[float, float] = (30.0, 90.0)
    setup_time: float = 10.0
    # trays and deposits
    tray_empty: float = 0.55
    tray_full: tuple[float, float] = (4.65, 4.95)     # gross mass when full
    deposit: tuple[float, float] = (0.2, 0.5)
    ramp_time: tuple[float, float] = (1.2, 2.0)
    # sensors
    gps_cep: float = 0.75
    bias_sigma: float = 0.0                            # slow Gauss-Markov GPS bias, m
    bias_tau: float = 300.0
    mass_noise: float = 0.01
    spike_rate: float = 0.005                          # handling spikes per s of picking
    accel_pick: float = 0.3
    accel_move: float = 2.0
    dropout_rate: float = 1.0                          # SBAS losses per hour
    dropout_len: tuple[float, float] = (5.0, 30.0)
    # deliberate pattern violations
    deviation_prob: float = 0.0
    persistent_prob: float = 0.0
    episode_limit: int = 0                             # injected episodes per day; 0 = no limit
    seed: int = 0

    def __post_init__(self):
        if self.n_rows < 1 or self.crew < 1:
            raise ConfigError("n_rows and crew must be positive")
        if not (self.row_spacing > 0 and self.row_length > 0):
            raise ConfigError("row_spacing and row_length must be positive")

    @property
    def gps_sigma(self) -> float:
        return cep_to_sigma(self.gps_cep)

    def rows(self) -> np.ndarray:
        return self.row_spacing * np.arange(self.n_rows, dtype=np.float64)

    def validate(self) -> None:
        lo, hi = self.tray_full
        if not (lo <= hi):
            raise InfeasibleConfig("tray_full range is reversed")
        if lo <= self.tray_empty:
            raise InfeasibleConfig(f"tray capacity {lo} kg is not above the empty tray mass {self.tray_empty} kg")
        if self.deposit[0] <= 0 or self.deposit[1] < self.deposit[0]:
            raise InfeasibleConfig("deposit range must be positive and ordered")
        if self.pick_speed[0] <= 0 or self.walk_speed <= 0 or self.carry_speed <= 0:
            raise InfeasibleConfig("speeds must be positive")
        if self.quota[0] < 1 or self.quota[1] < self.quota[0]:
            raise InfeasibleConfig("quota range must be >= 1 and ordered")
        if self.density <= 0 or not (0 <= self.density_amp < 1) or not (0 < self.dead_factor <= 1):
            raise InfeasibleConfig("yield density must stay positive everywhere")
        if self.ramp_time[0] <= 0:
            raise InfeasibleConfig("deposit ramps need a positive duration")
        if len(self.dead_zone) not in (0, 4):
            raise InfeasibleConfig("dead_zone needs four numbers or none")

    def to_kv(self) -> str:
        return kvfile.dataclass_to_kv(self, header="harvest simulator configuration")

    @classmethod
    def from_kv(cls, text: str, **overrides) -> "SimConfig":
        return kvfile.dataclass_from_kv(cls, kvfile.parse_kv(text), overrides)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_kv())

    @classmethod
    def load(cls, path, **overrides) -> "SimConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_kv(fh.read(), **overrides)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read simulator config {path}: {exc}") from exc


def noiseless(cfg: SimConfig) -> SimConfig:
    """Same scenario with every sensor error switched off."""
    return replace(cfg, gps_cep=0.0, bias_sigma=0.0, mass_noise=0.0, spike_rate=0.0, sway=0.0,
                   dropout_rate=0.0, accel_pick=0.0)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def local_to_geo(cfg: SimConfig, x, y):
    th = math.radians(cfg.heading_deg)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    east = x * math.cos(th) - y * math.sin(th)
    north = x * math.sin(th) + y * math.cos(th)
    k = 180.0 / math.pi / EARTH_RADIUS_M
    return cfg.origin_lat + north * k, cfg.origin_lon + east * k / math.cos(math.radians(cfg.origin_lat))


def field_model(cfg: SimConfig) -> FieldModel:
    """Field definition as a grower would survey it: bed centres at both ends and mid-row."""
    rows = cfg.rows()
    s = cfg.row_spacing
    x0, x1 = rows[0] - s / 2, rows[-1] + s / 2
    beds_x = x0 + s * np.arange(cfg.n_rows + 1)
    local = np.array([(bx, by) for bx in beds_x for by in (0.0, cfg.row_length / 2, cfg.row_length)])
    lat, lon = local_to_geo(cfg, local[:, 0], local[:, 1])
    return FieldModel(rows=rows, row_spacing=s,
                      boundary=np.array([(x0, 0.0), (x1, 0.0), (x1, cfg.row_length), (x0, cfg.row_length)]),
                      y_extent=(0.0, cfg.row_length), origin_geo=(cfg.origin_lat, cfg.origin_lon),
                      survey_geo=np.column_stack([lat, lon]), survey_local=local)


def density(cfg: SimConfig, x, y, day_factor: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lx, ly = cfg.density_wavelength
    rho = cfg.density * day_factor * (1 + cfg.density_amp * np.sin(2 * np.pi * x / lx + 0.7)
                                      * np.cos(2 * np.pi * y / ly + 0.3))
    if cfg.dead_zone:
        zx0, zy0, zx1, zy1 = cfg.dead_zone
        rho = np.where((x >= zx0) & (x <= zx1) & (y >= zy0) & (y <= zy1), rho * cfg.dead_factor, rho)
    return rho


def field_yield(cfg: SimConfig, day_factor: float = 1.0, h: float = 0.01) -> float:
    ys = np.arange(0.0, cfg.row_length, h) + h / 2
    return float(sum(density(cfg, x, ys, day_factor).sum() * h for x in cfg.rows()))


class _Profile:
    """Cumulative picked mass along a straight pass, tabulated every ``h`` metres."""

    def __init__(self, cfg, x, y_a, y_b, day_factor, h=0.01):
        length = abs(y_b - y_a)
        self.d = 1 if y_b >= y_a else -1
        self.y_a = y_a
        n = max(1, int(math.ceil(length / h)))
        self.s = np.linspace(0.0, length, n + 1)
        mid = (self.s[:-1] + self.s[1:]) / 2
        rho = density(cfg, x, y_a + self.d * mid, day_factor)
        self.cum = np.concatenate([[0.0], np.cumsum(rho * np.diff(self.s))])

    @property
    def total(self) -> float:
        return float(self.cum[-1])

    def mass(self, s):
        return np.interp(s, self.s, self.cum)

    def where(self, m: float) -> float:
        """Distance at which the cumulative mass reaches ``m``."""
        i = int(np.searchsorted(self.cum, m, side="left"))
        if i <= 0:
            return 0.0
        if i >= self.cum.size:
            return float(self.s[-1])
        c0, c1 = self.cum[i - 1], self.cum[i]
        f = 0.0 if c1 == c0 else (m - c0) / (c1 - c0)
        return float(self.s[i - 1] + f * (self.s[i] - self.s[i - 1]))


# ---------------------------------------------------------------------------
# picker state machine
# ---------------------------------------------------------------------------

@dataclass
class _Task:
    row: int
    section: int         # 0 lower (toward y = 0), 1 upper (toward y = L)
    index: int

    def direction(self) -> int:
        return -1 if self.section == 0 else 1


@dataclass
class PassRecord:
    cart_id: str
    task: int
    row: int
    section: int
    direction: int
    t0: float
    t1: float
    y0: float
    y1: float


@dataclass
class Episode:
    kind: str            # "deviation" or "persistent"
    cart_id: str
    t_start: float       # unix s
    t_end: float
    true_row: int
    shown_row: int
    section: int


class _Picker:
    def __init__(self, cfg: SimConfig, cart_id: str, rng: np.random.Generator, quota: int,
                 day_factor: float, t0: float):
        self.cfg = cfg
        self.cart_id = cart_id
        self.rng = rng
        self.quota = quota
        self.day_factor = day_factor
        self.rows = cfg.rows()
        self.t = t0
        self.section = 0
        self.x, self.y = self._station(0)
        self.pos = [(t0, self.x, self.y)]
        self.mass = [(t0, 0.0)]
        self.gross = 0.0
        self.states: list[tuple[float, float, int, int, int, int]] = []  # t0, t1, state, row, dir, tray
        self.tray = -1
        self.tray_cap = 0.0
        self.tray_net = 0.0
        self.tray_seg = 0
        self.trays_done = 0
        self.task: _Task | None = None
        self.y_resume: float | None = None
        self.at_station = True
        self.done = False
        self.ramp_end = t0
        self.segments: list[TraySegmentTruth] = []
        self.feet: list[tuple[int, int, int, int, float]] = []   # tray, seg, row, foot, kg
        self.passes: list[PassRecord] = []
        self._state("start", 5.0)
        self._setup()

    # -- primitives -------------------------------------------------------
    def _station(self, section):
        c = self.cfg
        xs = (self.rows[0] + self.rows[-1]) / 2
        return xs, (-c.station_offset if section == 0 else c.row_length + c.station_offset)

    def _hl(self, section):
        return -self.cfg.headland if section == 0 else self.cfg.row_length + self.cfg.headland

    def _key(self, t, x, y):
        if self.pos and t <= self.pos[-1][0]:
            self.pos[-1] = (self.pos[-1][0], x, y) if t == self.pos[-1][0] else self.pos[-1]
            return
        self.pos.append((t, x, y))

    def _mass_to(self, t_start, t_end, m):
        if t_start > self.mass[-1][0]:
            self.mass.append((t_start, self.gross))
        self.mass.append((max(t_end, self.mass[-1][0] + 1e-6), m))
        self.gross = m

    def _record(self, t0, t1, state, row=-1, d=0):
        if t1 > t0:
            self.states.append((t0, t1, S[state], row, d, self.tray))

    def _state(self, state, dur, row=-1, d=0):
        self._key(self.t, self.x, self.y)
        self._record(self.t, self.t + dur, state, row, d)
        self.t += dur
        self._key(self.t, self.x, self.y)

    def _walk(self, x, y, state, speed, row=-1, d=0):
        dist = math.hypot(x - self.x, y - self.y)
        if dist <= 0:
            return
        self._key(self.t, self.x, self.y)
        dur = dist / speed
        self._record(self.t, self.t + dur, state, row, d)
        self.t += dur
        self.x, self.y = x, y
        self._key(self.t, x, y)

    def _setup(self):
        c = self.cfg
        self.tray += 1
        self.tray_seg = 0
        self.tray_net = 0.0
        self.tray_cap = float(self.rng.uniform(*c.tray_full)) - c.tray_empty
        self._mass_to(self.t, self.t + 0.5, c.tray_empty)
        self._state("setup", c.setup_time)

    # -- actions ----------------------------------------------------------
    def start_task(self, task: _Task):
        self.task = task
        self.y_resume = self.cfg.row_length / 2

    def step(self):
        """Walk to the current task position and pick until the tray fills or the section ends."""
        c = self.cfg
        task = self.task
        xj = float(self.rows[task.row])
        d = task.direction()
        y_end = 0.0 if task.section == 0 else c.row_length
        if self.at_station:
            hl = self._hl(self.section)
            self._walk(xj, hl, "walk-empty-tray-headland", c.walk_speed)
            self._walk(xj, self.y_resume, "walk-empty-tray-row", c.walk_speed, task.row, 0)
            self.at_station = False
        elif abs(self.x - xj) > 1e-9 or abs(self.y - self.y_resume) > 1e-9:
            hl = self._hl(self.section)
            self._walk(self.x, hl, "walk-to-next-row", c.walk_speed)
            self._walk(xj, hl, "walk-to-next-row", c.walk_speed)
            self._walk(xj, self.y_resume, "walk-to-next-row", c.walk_speed, task.row, 0)
        self.section = task.section
        full = self._pick(task, xj, self.y_resume, y_end, d)
        if full:
            finished = abs(self.y - y_end) < 1e-9
            self._deliver()
            if finished:
                self.task = None
            else:
                self.y_resume = self.y_at_fill
        else:
            self.task = None

    def _pick(self, task, xj, y_a, y_b, d) -> bool:
        c = self.cfg
        rng = self.rng
        prof = _Profile(c, xj, y_a, y_b, self.day_factor)
        room = self.tray_cap - self.tray_net
        full = prof.total >= room
        s_stop = prof.where(room) if full else float(prof.s[-1])
        picked = room if full else prof.total
        v = float(rng.uniform(*c.pick_speed))
        t_start = self.t
        # deposits: the hand empties onto the tray whenever a batch is collected
        triggers = []
        acc = 0.0
        while True:
            b = float(rng.uniform(*c.deposit))
            if acc + b >= picked:
                break
            acc += b
            triggers.append(acc)
        triggers.append(picked)
        prev = 0.0
        ramp_end = max(self.ramp_end, t_start)
        for m in triggers:
            amount = m - prev
            prev = m
            if amount <= 0:
                continue
            t_trig = t_start + prof.where(m) / v
            r0 = max(t_trig, ramp_end)
            r1 = r0 + float(rng.uniform(*c.ramp_time))
            self._mass_to(r0, r1, self.gross + amount)
            ramp_end = r1
        self.ramp_end = ramp_end
        t_move_end = t_start + s_stop / v
        t_end = max(t_move_end, ramp_end)
        y_stop = y_a + d * s_stop
        self._key(t_start, xj, y_a)
        self._key(t_move_end, xj, y_stop)
        self._key(t_end, xj, y_stop)
        self._record(t_start, t_end, "picking", task.row, d)
        self.t = t_end
        self.x, self.y = xj, y_stop
        self.y_at_fill = y_stop
        self.passes.append(PassRecord(self.cart_id, task.index, task.row, task.section, d,
                                      t_start, t_end, y_a, y_stop))

        # per-foot truth for this stretch
        lo, hi = min(y_a, y_stop), max(y_a, y_stop)
        k0, k1 = int(math.floor(lo / FOOT)), int(math.floor(hi / FOOT))
        seg_feet = []
        for k in range(k0, k1 + 1):
            a, b = max(lo, k * FOOT), min(hi, (k + 1) * FOOT)
            if b <= a:
                continue
            sa, sb = sorted((abs(a - y_a), abs(b - y_a)))
            kg = float(prof.mass(sb) - prof.mass(sa))
            if kg > 0:
                seg_feet.append((self.tray, self.tray_seg, task.row, k, kg))
        self.feet.extend(seg_feet)
        net = math.fsum(f[4] for f in seg_feet)
        self.segments.append(TraySegmentTruth(
            self.cart_id, "", self.tray, self.tray_seg, task.row, y_a, y_stop,
            "E" if self.tray_seg == 0 else "P", "F" if full else "P", net))
        self.tray_seg += 1
        self.tray_net += picked
        return full

    def _deliver(self):
        c = self.cfg
        sec = self.section
        self._walk(self.x, self._hl(sec), "transp-full-tray-row", c.carry_speed, self.task.row, 0)
        sx, sy = self._station(sec)
        self._walk(sx, sy, "transp-full-tray-headland", c.carry_speed)
        self._mass_to(self.t, self.t + 0.5, 0.0)
        self.trays_done += 1
        self._state("idle-in-queue", float(self.rng.uniform(*c.service_time)))
        self.at_station = True
        if self.trays_done >= self.quota:
            self._state("stop", 5.0)
            self.done = True
        else:
            self._setup()


# ---------------------------------------------------------------------------
# day simulation
# ---------------------------------------------------------------------------

@dataclass
class CartLog:
    """Raw log columns of one cart (one row per 10 Hz sample that survived dropouts)."""

    cart_id: str
    pi_unix_ts: np.ndarray
    gnss_unix_ts: np.ndarray
    gnss_tow: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    height: np.ndarray
    a_x: np.ndarray
    a_y: np.ndarray
    a_z: np.ndarray
    raw_mass: np.ndarray

    def __len__(self):
        return int(self.gnss_unix_ts.size)

    def records(self) -> list[RawRecord]:
        cols = [getattr(self, c) for c in COLUMNS]
        return [RawRecord(float(r[0]), float(r[1]), int(r[2]), *map(float, r[3:]))
                for r in zip(*(c.tolist() for c in cols))]

    def to_bytes(self) -> bytes:
        return serialize_logs(self.records())

    def track(self, cal: Calibration, transform) -> CartTrack:
        """Track as ingestion would build it from this log's file, without the text round trip."""
        return build_track_columns(self.gnss_unix_ts, self.lat, self.lon, self.a_x, self.a_y, self.a_z,
                                   self.raw_mass, cal, transform, self.cart_id)


@dataclass
class CartTruth:
    """Per-sample truth aligned with the cart's log rows."""

    cart_id: str
    t: np.ndarray
    state: np.ndarray       # index into STATES
    row: np.ndarray         # true row, -1 outside rows
    direction: np.ndarray   # +1/-1 while picking, 0 otherwise
    tray: np.ndarray
    x_true: np.ndarray
    y_true: np.ndarray
    mass_true: np.ndarray   # gross kg on the load cell, before sensor noise


@dataclass
class SimTruth:
    day: str
    carts: dict[str, CartTruth]
    segments: list[TraySegmentTruth]
    counts: dict[tuple[str, str], int]
    feet: list[tuple[str, int, int, int, int, float]]    # cart, tray, seg, row, foot, kg
    passes: list[PassRecord]
    episodes: list[Episode]
    calibration: dict[str, Calibration]                    # true load-cell lines
    calibration_samples: dict[str, list[tuple[float, float]]]

    def tray_mass(self) -> dict[tuple[str, int], float]:
        out: dict[tuple[str, int], list[float]] = {}
        for c, tr, _, _, _, kg in self.feet:
            out.setdefault((c, tr), []).append(kg)
        return {k: math.fsum(v) for k, v in out.items()}

    def occupancy(self) -> list[tuple[str, int, int, float, float]]:
        """(cart, row, direction, t1, t2) for every picking interval."""
        return [(p.cart_id, p.row, p.direction, p.t0, p.t1) for p in self.passes]


def cart_name(i: int) -> str:
    return f"cart{i + 1:02d}"


def day_name(day: int) -> str:
    return f"day{day + 1:02d}"


def _tasks(cfg: SimConfig) -> list[_Task]:
    order = [(r, 0) for r in range(cfg.n_rows)] + [(r, 1) for r in reversed(range(cfg.n_rows))]
    return [_Task(r, s, i) for i, (r, s) in enumerate(order)]


def _sample_states(states, t):
    starts = np.array([s[0] for s in states])
    i = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(states) - 1)
    arr = np.array([(s[2], s[3], s[4], s[5]) for s in states], dtype=np.int64)
    ends = np.array([s[1] for s in states])
    inside = t < ends[i]
    st = np.where(inside, arr[i, 0], S["stop"])
    return st, np.where(inside, arr[i, 1], -1), np.where(inside, arr[i, 2], 0), arr[i, 3]


def _inject(cfg: SimConfig, pickers, rng) -> list[Episode]:
    """Choose GPS offset episodes; times are simulation seconds until converted by the caller."""
    eps: list[Episode] = []
    by_task: dict[tuple[str, int], list[PassRecord]] = {}
    for p in pickers:
        for rec in p.passes:
            by_task.setdefault((p.cart_id, rec.task), []).append(rec)
    harvested = {(rec.row, rec.section): rec.cart_id for p in pickers for rec in p.passes}
    for (cart, _), recs in sorted(by_task.items(), key=lambda kv: (kv[1][0].t0, kv[0][0])):
        if cfg.episode_limit and len(eps) >= cfg.episode_limit:
            break
        row, sec = recs[0].row, recs[0].section
        if cfg.deviation_prob > 0 and len(recs) >= 3 and rng.random() < cfg.deviation_prob:
            # a deviation is a minority excursion between observable passes in the true row
            span = [rec.t1 - rec.t0 for rec in recs]
            ks = [k for k in range(1, len(recs) - 1)
                  if 2 * span[k] <= sum(span) - span[k] and min(span[k - 1], span[k + 1]) >= MIN_FLANK]
            if ks:
                k = ks[int(rng.integers(len(ks)))]
                nb = [r for r in (row - 1, row + 1) if 0 <= r < cfg.n_rows]
                shown = nb[int(rng.integers(len(nb)))]
                eps.append(Episode("deviation", cart, recs[k].t0, recs[k].t1, row, shown, sec))
        elif cfg.persistent_prob > 0 and len(recs) >= 2:
            nb = [r for r in (row - 1, row + 1)
                  if 0 <= r < cfg.n_rows and harvested.get((r, sec)) not in (None, cart)]
            if nb and rng.random() < cfg.persistent_prob:
                k = int(rng.integers(1, len(recs)))
                shown = nb[int(rng.integers(len(nb)))]
                eps.append(Episode("persistent", cart, recs[k].t0, recs[-1].t1, row, shown, sec))
    return eps


def simulate_day(cfg: SimConfig, day: int = 0) -> tuple[dict[str, CartLog], SimTruth]:
    """One harvest day: raw logs per cart plus complete ground truth.

    Deterministic in ``(cfg, day)``; each picker draws from its own substream.
    """
    cfg.validate()
    ss = np.random.SeedSequence([cfg.seed, day])
    day_ss, inj_ss, *picker_ss = ss.spawn(cfg.crew + 2)
    day_rng = np.random.default_rng(day_ss)
    day_factor = 1.0 + cfg.day_variation * float(day_rng.uniform(-1, 1))
    rngs = [np.random.default_rng(s) for s in picker_ss]
    quotas = [int(r.integers(int(cfg.quota[0]), int(cfg.quota[1]) + 1)) for r in rngs]
    need = 1.05 * cfg.crew * cfg.quota[1] * (cfg.tray_full[1] - cfg.tray_empty)
    have = field_yield(cfg, day_factor)
    if have < need:
        raise InfeasibleConfig(f"field yields {have:.0f} kg but the crew may pick up to {need:.0f} kg; "
                               "add rows, lengthen rows or lower the quota")

    pickers = [_Picker(cfg, cart_name(i), rngs[i], quotas[i], day_factor, float(rngs[i].uniform(0, 60)))
               for i in range(cfg.crew)]
    queue = _tasks(cfg)
    heap = [(p.t, i) for i, p in enumerate(pickers)]
    heapq.heapify(heap)
    while heap:
        _, i = heapq.heappop(heap)
        p = pickers[i]
        if p.done:
            continue
        if p.task is None:
            if not queue:  # infeasibility check makes this unreachable for sane configs
                raise InfeasibleConfig("the crew ran out of rows before meeting its quota")
            p.start_task(queue.pop(0))
        p.step()
        if not p.done:
            heapq.heappush(heap, (p.t, i))

    episodes = _inject(cfg, pickers, np.random.default_rng(inj_ss))
    dname = day_name(day)
    logs: dict[str, CartLog] = {}
    carts: dict[str, CartTruth] = {}
    calib: dict[str, Calibration] = {}
    cal_samples: dict[str, list[tuple[float, float]]] = {}
    for i, p in enumerate(pickers):
        logs[p.cart_id], carts[p.cart_id], calib[p.cart_id], cal_samples[p.cart_id] = \
            _render(cfg, p, rngs[i], [e for e in episodes if e.cart_id == p.cart_id])

    segments = [replace(s, day=dname) for p in pickers for s in p.segments]
    feet = [(p.cart_id, *f) for p in pickers for f in p.feet]
    counts = {(p.cart_id, dname): p.trays_done for p in pickers}
    passes = [replace(r, t0=r.t0 + EPOCH, t1=r.t1 + EPOCH) for p in pickers for r in p.passes]
    episodes = [replace(e, t_start=e.t_start + EPOCH, t_end=e.t_end + EPOCH) for e in episodes]
    # tray-level exactness: tray nets are defined by their per-foot truth
    return logs, SimTruth(dname, carts, segments, counts, feet, passes, episodes, calib, cal_samples)


def _render(cfg: SimConfig, p: _Picker, rng: np.random.Generator, episodes: list[Episode]):
    """Sample a picker's keyframes at 10 Hz and apply sensor models."""
    t_first = p.pos[0][0]
    t_last = max(p.pos[-1][0], p.mass[-1][0])
    n = int(math.floor((t_last - t_first) / DT)) + 1
    k = np.arange(n)
    t = t_first + DT * k
    pt = np.array([q[0] for q in p.pos])
    x = np.interp(t, pt, [q[1] for q in p.pos])
    y = np.interp(t, pt, [q[2] for q in p.pos])
    m_true = np.interp(t, [q[0] for q in p.mass], [q[1] for q in p.mass])
    state, row, direction, tray = _sample_states(p.states, t)

    picking = state == S["picking"]
    in_row = row >= 0
    # measured position
    xm = x.copy()
    ym = y.copy()
    if cfg.sway > 0:
        phase = float(rng.uniform(0, 2 * np.pi))
        xm = xm + np.where(in_row, cfg.sway * np.sin(2 * np.pi * t / 15.0 + phase), 0.0)
    sig = cfg.gps_sigma
    if sig > 0:
        xm = xm + rng.normal(0.0, sig, n)
        ym = ym + rng.normal(0.0, sig, n)
    if cfg.bias_sigma > 0:
        phi = math.exp(-DT / cfg.bias_tau)
        innov = rng.normal(0.0, cfg.bias_sigma * math.sqrt(1 - phi * phi), (n, 2))
        b = np.empty((n, 2))
        b[0] = rng.normal(0.0, cfg.bias_sigma, 2)
        for j in range(1, n):  # short recursion; n is at most a few 10^4
            b[j] = phi * b[j - 1] + innov[j]
        xm += b[:, 0]
        ym += b[:, 1]
    for e in episodes:
        sel = (t >= e.t_start) & (t <= e.t_end)
        xm[sel] += (e.shown_row - e.true_row) * cfg.row_spacing
    # load cell
    mm = m_true.copy()
    if cfg.mass_noise > 0:
        mm = mm + rng.normal(0.0, cfg.mass_noise, n)
    if cfg.spike_rate > 0:
        hit = picking & (rng.random(n) < cfg.spike_rate * DT)
        mm = mm + np.where(hit, rng.uniform(1.0, 3.0, n), 0.0)
    slope = float(rng.uniform(0.9, 1.1)) * 1e-3
    intercept = float(rng.uniform(-0.05, 0.05))
    raw = (mm - intercept) / slope
    cal_mass = [0.0, 0.55, 1.0, 2.0, 3.0, 4.0, 5.0]
    raw_noise = cfg.mass_noise / slope
    cal = [(float((m - intercept) / slope + (rng.normal(0.0, raw_noise) if raw_noise > 0 else 0.0)), m)
           for m in cal_mass]
    # accelerometer
    sd = np.where(picking, cfg.accel_pick, cfg.accel_move)
    acc = rng.normal(0.0, 1.0, (n, 3)) * sd[:, None]
    acc[:, 2] += 9.81
    height = 30.0 + (rng.normal(0.0, 0.05, n) if sig > 0 else 0.0)
    # dropouts
    keep = np.ones(n, dtype=bool)
    if cfg.dropout_rate > 0:
        hours = (t_last - t_first) / 3600.0
        for _ in range(int(rng.poisson(cfg.dropout_rate * hours))):
            a = float(rng.uniform(t_first, t_last))
            keep &= ~((t >= a) & (t < a + float(rng.uniform(*cfg.dropout_len))))

    gnss = np.round(EPOCH + t_first + DT * k, 1)
    pi = gnss + 0.02 + (rng.uniform(-0.005, 0.005, n) if sig > 0 else 0.0)
    tow = np.floor(((gnss - GPS_UNIX_OFFSET) % 604800.0) * 1000.0 + 0.5).astype(np.int64)
    lat, lon = local_to_geo(cfg, xm, ym)
    height = np.broadcast_to(height, (n,)).astype(np.float64)
    log = CartLog(p.cart_id, pi[keep], gnss[keep], tow[keep], lat[keep], lon[keep], height[keep],
                  acc[keep, 0], acc[keep, 1], acc[keep, 2], raw[keep])
    truth = CartTruth(p.cart_id, gnss[keep], state[keep].astype(np.int8), row[keep], direction[keep].astype(np.int8),
                      tray[keep], x[keep], y[keep], m_true[keep])
    return log, truth, Calibration(slope, intercept, 1.0), cal


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def write_day(out_dir, cfg: SimConfig, logs: dict[str, CartLog], truth: SimTruth, write_field: bool = True) -> None:
    """Directory layout::

        field.txt                       (when write_field)
        <day>/logs/<cart>.csv           raw logs
        <day>/calibration/<cart>.txt    fitted from the simulated calibration weights
        <day>/truth/tray_events.csv, tray_counts.csv, per_foot.csv, episodes.csv, states/<cart>.csv
    """
    from .ingest import calibrate_load_cell

    if write_field:
        os.makedirs(out_dir, exist_ok=True)
        save_field(field_model(cfg), os.path.join(out_dir, "field.txt"))
    day_dir = os.path.join(out_dir, truth.day)
    for sub in ("logs", "calibration", "truth", os.path.join("truth", "states")):
        os.makedirs(os.path.join(day_dir, sub), exist_ok=True)
    for cid, log in logs.items():
        with open(os.path.join(day_dir, "logs", f"{cid}.csv"), "wb") as fh:
            fh.write(log.to_bytes())
        save_calibration(calibrate_load_cell(truth.calibration_samples[cid]),
                         os.path.join(day_dir, "calibration", f"{cid}.txt"))
        ct = truth.carts[cid]
        with open(os.path.join(day_dir, "truth", "states", f"{cid}.csv"), "w", encoding="utf-8") as fh:
            fh.write("gnss_unix_ts,state,row,direction,tray,x,y,mass\n")
            for r in zip(ct.t.tolist(), ct.state.tolist(), ct.row.tolist(), ct.direction.tolist(),
                         ct.tray.tolist(), ct.x_true.tolist(), ct.y_true.tolist(), ct.mass_true.tolist()):
                fh.write(f"{r[0]!r},{STATES[r[1]]},{r[2]},{r[3]},{r[4]},{r[5]!r},{r[6]!r},{r[7]!r}\n")
    tdir = os.path.join(day_dir, "truth")
    write_tray_events(truth.segments, os.path.join(tdir, "tray_events.csv"))
    write_tray_counts(truth.counts, os.path.join(tdir, "tray_counts.csv"))
    with open(os.path.join(tdir, "per_foot.csv"), "w", encoding="utf-8") as fh:
        fh.write("cart_id,tray,seg,row,foot,mass_kg\n")
        for c, tr, sg, rw, ft, kg in truth.feet:
            fh.write(f"{c},{tr},{sg},{rw},{ft},{kg!r}\n")
    with open(os.path.join(tdir, "episodes.csv"), "w", encoding="utf-8") as fh:
        fh.write("kind,cart_id,t_start,t_end,true_row,shown_row,section\n")
        for e in truth.episodes:
            fh.write(f"{e.kind},{e.cart_id},{e.t_start!r},{e.t_end!r},{e.true_row},{e.shown_row},{e.section}\n")
