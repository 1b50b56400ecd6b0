"""Raw cart log parsing, load-cell calibration, and track construction.

Log format: UTF-8, comma-delimited, one header line (:data:`HEADER`), then one
record per line. ``gnss_unix_ts`` may be empty when no fix time was recorded.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kvfile
from .errors import DegenerateSamples, EmptyLog, HeaderMismatch, IngestError
from .field import FieldTransform, to_local

COLUMNS = ("pi_unix_ts", "gnss_unix_ts", "gnss_tow", "lat", "lon", "height",
           "a_x", "a_y", "a_z", "raw_mass")
HEADER = ",".join(COLUMNS)


class RawRecord(NamedTuple):
    pi_unix_ts: float
    gnss_unix_ts: float | None
    gnss_tow: int
    lat: float
    lon: float
    height: float
    a_x: float
    a_y: float
    a_z: float
    raw_mass: float

    @property
    def timestamp(self) -> float:
        """GNSS time when present, Pi clock otherwise."""
        return self.pi_unix_ts if self.gnss_unix_ts is None else self.gnss_unix_ts


@dataclass
class ParsedLog:
    records: list[RawRecord]
    skipped: list[int] = field(default_factory=list)  # 1-based data-line numbers

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _finite(b: bytes) -> float:
    v = float(b)
    if not math.isfinite(v):
        raise ValueError("non-finite")
    return v


def _parse_line(line: bytes) -> RawRecord:
    parts = line.split(b",")
    if len(parts) != 10:
        raise ValueError("wrong column count")
    g = parts[1].strip()
    return RawRecord(
        _finite(parts[0]),
        None if g == b"" else _finite(g),
        int(parts[2]),
        _finite(parts[3]), _finite(parts[4]), _finite(parts[5]),
        _finite(parts[6]), _finite(parts[7]), _finite(parts[8]),
        _finite(parts[9]),
    )


def parse_raw_log(stream) -> ParsedLog:
    """Parse a raw log from bytes, a path, or a binary file object.

    Malformed lines are skipped and their data-line numbers (header excluded)
    reported in ``skipped``; nothing short of a missing/garbled header aborts.
    """
    if isinstance(stream, (bytes, bytearray, memoryview)):
        data = bytes(stream)
    elif isinstance(stream, (str, os.PathLike)):
        with open(stream, "rb") as fh:
            data = fh.read()
    else:
        data = stream.read()
        if isinstance(data, str):
            data = data.encode("utf-8")

    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        raise EmptyLog("log is empty")
    header = lines[0].rstrip(b"\r")
    if header.startswith(b"\xef\xbb\xbf"):
        header = header[3:]
    if header.strip() != HEADER.encode():
        raise HeaderMismatch(f"expected header {HEADER!r}, got {header[:120]!r}")
    if len(lines) == 1:
        raise EmptyLog("log has a header but no data lines")

    records: list[RawRecord] = []
    skipped: list[int] = []
    for n, line in enumerate(lines[1:], start=1):
        try:
            records.append(_parse_line(line.rstrip(b"\r")))
        except (ValueError, UnicodeDecodeError):
            skipped.append(n)
    return ParsedLog(records, skipped)


def _num(v: float) -> str:
    return float.__repr__(float(v))


def serialize_logs(records) -> bytes:
    """Inverse of :func:`parse_raw_log` (floats written with ``repr`` so values round-trip)."""
    out = [HEADER]
    for r in records:
        out.append(",".join((
            _num(r.pi_unix_ts),
            "" if r.gnss_unix_ts is None else _num(r.gnss_unix_ts),
            str(int(r.gnss_tow)),
            _num(r.lat), _num(r.lon), _num(r.height),
            _num(r.a_x), _num(r.a_y), _num(r.a_z), _num(r.raw_mass),
        )))
    return ("\n".join(out) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    slope: float
    intercept: float
    r_squared: float

    def apply(self, raw):
        return self.slope * np.asarray(raw, dtype=np.float64) + self.intercept


def calibrate_load_cell(samples) -> Calibration:
    """Ordinary least-squares line ``mass = slope * raw + intercept``."""
    arr = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    raw, mass = arr[:, 0], arr[:, 1]
    if arr.shape[0] < 2 or np.all(raw == raw[0]):
        raise DegenerateSamples("calibration needs at least two distinct raw readings")
    rc = raw - raw.mean()
    mc = mass - mass.mean()
    slope = float(np.dot(rc, mc) / np.dot(rc, rc))
    intercept = float(mass.mean() - slope * raw.mean())
    if not slope > 0:
        raise DegenerateSamples(f"calibration slope must be positive, got {slope}")
    ss_tot = float(np.dot(mc, mc))
    resid = mass - (slope * raw + intercept)
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.dot(resid, resid)) / ss_tot
    return Calibration(slope, intercept, min(1.0, max(0.0, r2)))


def save_calibration(cal: Calibration, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(kvfile.format_kv([
            ("slope", _num(cal.slope)),
            ("intercept", _num(cal.intercept)),
            ("r_squared", _num(cal.r_squared)),
        ], header="load-cell calibration: mass_kg = slope * raw + intercept"))


def load_calibration(path) -> Calibration:
    try:
        doc = kvfile.read_kv(path)
        return Calibration(float(kvfile.single(doc, "slope")),
                           float(kvfile.single(doc, "intercept")),
                           float(kvfile.single(doc, "r_squared", "nan")))
    except (OSError, KeyError, ValueError) as exc:
        raise IngestError(f"cannot read calibration {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

_BASE = ("x", "y", "t", "mass", "ax", "ay", "az", "src")
_ANNOT = ("y_s", "cluster", "row", "row_new", "flag", "direction", "mass_f", "tray_id")


@dataclass
class CartTrack:
    """Column-oriented trajectory of one cart in the local frame.

    ``src`` is each point's index in the originating log. Annotation columns
    (``row``/``row_new`` are row indices, -1 for unassigned) are filled by the
    later pipeline stages and stay ``None`` until then.
    """

    cart_id: str
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    mass: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray
    src: np.ndarray
    y_s: np.ndarray | None = None
    cluster: np.ndarray | None = None
    row: np.ndarray | None = None
    row_new: np.ndarray | None = None
    flag: np.ndarray | None = None
    direction: np.ndarray | None = None
    mass_f: np.ndarray | None = None
    tray_id: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.t.size)

    @classmethod
    def empty(cls, cart_id: str) -> "CartTrack":
        z = np.zeros(0)
        return cls(cart_id, z, z, z, z, z, z, z, np.zeros(0, dtype=np.int64))

    def take(self, idx) -> "CartTrack":
        """New track holding the selected points (mask or index array), all columns kept."""
        kw = {}
        for name in _BASE + _ANNOT:
            col = getattr(self, name)
            kw[name] = None if col is None else col[idx]
        return CartTrack(self.cart_id, **kw)

    def copy(self) -> "CartTrack":
        return self.take(slice(None))

    def sorted_by_time(self) -> "CartTrack":
        order = np.argsort(self.t, kind="stable")
        if np.all(order == np.arange(order.size)):
            return self
        return self.take(order)


def build_track(records, cal: Calibration, t: FieldTransform, cart_id) -> CartTrack:
    records = list(records)
    if not records:
        return CartTrack.empty(str(cart_id))
    arr = np.array([(r.timestamp, r.lat, r.lon, r.a_x, r.a_y, r.a_z, r.raw_mass) for r in records],
                   dtype=np.float64)
    return build_track_columns(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5], arr[:, 6],
                               cal, t, cart_id)


def build_track_columns(timestamp, lat, lon, a_x, a_y, a_z, raw_mass, cal: Calibration, t: FieldTransform,
                        cart_id) -> CartTrack:
    """Same as :func:`build_track` for data already held as columns."""
    ts = np.array(timestamp, dtype=np.float64)
    if ts.size == 0:
        return CartTrack.empty(str(cart_id))
    x, y = to_local(t, np.asarray(lat, dtype=np.float64), np.asarray(lon, dtype=np.float64))
    return CartTrack(
        cart_id=str(cart_id),
        x=np.asarray(x, dtype=np.float64), y=np.asarray(y, dtype=np.float64), t=ts,
        mass=cal.apply(np.asarray(raw_mass, dtype=np.float64)),
        ax=np.array(a_x, dtype=np.float64), ay=np.array(a_y, dtype=np.float64),
        az=np.array(a_z, dtype=np.float64),
        src=np.arange(ts.size, dtype=np.int64),
    )
