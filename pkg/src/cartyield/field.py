"""Field geometry: rows, boundary, grid, and the GPS <-> local-frame transform."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import shapely

from . import kvfile
from .errors import (
    CollinearControlPoints,
    FieldFileError,
    NonPositiveResolution,
    TooFewPoints,
)

EARTH_RADIUS_M = 6_371_008.8


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldTransform:
    """Affine map from tangent-plane metres (about ``lat0, lon0``) to the local field frame.

    ``forward`` is 2x3 acting on ``[east, north, 1]``; ``inverse`` maps local
    ``[x, y, 1]`` back to ``[east, north]``.
    """

    forward: np.ndarray
    inverse: np.ndarray
    lat0: float
    lon0: float
    rms_fit_error: float

    def project(self, lat, lon):
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        k = math.pi / 180.0 * EARTH_RADIUS_M
        east = (lon - self.lon0) * k * math.cos(math.radians(self.lat0))
        north = (lat - self.lat0) * k
        return east, north

    def unproject(self, east, north):
        k = math.pi / 180.0 * EARTH_RADIUS_M
        lat = self.lat0 + np.asarray(north) / k
        lon = self.lon0 + np.asarray(east) / (k * math.cos(math.radians(self.lat0)))
        return lat, lon


def _affine_inverse(forward: np.ndarray) -> np.ndarray:
    A = forward[:, :2]
    b = forward[:, 2]
    Ainv = np.linalg.inv(A)
    return np.hstack([Ainv, (-Ainv @ b)[:, None]])


def fit_field_transform(surveyed_geo, surveyed_local) -> FieldTransform:
    """Least-squares affine fit from surveyed bed centres.

    ``surveyed_geo`` is a sequence of ``(lat, lon)``; ``surveyed_local`` the
    matching ``(x, y)`` in metres. Geo points are projected equirectangularly
    about their centroid before fitting.
    """
    geo = np.asarray(surveyed_geo, dtype=np.float64).reshape(-1, 2)
    loc = np.asarray(surveyed_local, dtype=np.float64).reshape(-1, 2)
    if geo.shape[0] != loc.shape[0]:
        raise ValueError("geo and local correspondence lists differ in length")
    if geo.shape[0] < 3:
        raise TooFewPoints(f"need at least 3 correspondences, got {geo.shape[0]}")

    lat0, lon0 = (float(v) for v in geo.mean(axis=0))
    proto = FieldTransform(np.zeros((2, 3)), np.zeros((2, 3)), lat0, lon0, 0.0)
    east, north = proto.project(geo[:, 0], geo[:, 1])
    src = np.column_stack([east, north])

    for pts in (src, loc):
        centred = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
            raise CollinearControlPoints("control points are collinear (rank < 2)")

    design = np.column_stack([src, np.ones(len(src))])
    coef, *_ = np.linalg.lstsq(design, loc, rcond=None)
    forward = coef.T.copy()
    resid = design @ coef - loc
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return FieldTransform(forward, _affine_inverse(forward), lat0, lon0, rms)


def to_local(t: FieldTransform, lat, lon):
    east, north = t.project(lat, lon)
    A = t.forward
    x = A[0, 0] * east + A[0, 1] * north + A[0, 2]
    y = A[1, 0] * east + A[1, 1] * north + A[1, 2]
    return x, y


def to_geo(t: FieldTransform, x, y):
    B = t.inverse
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    east = B[0, 0] * x + B[0, 1] * y + B[0, 2]
    north = B[1, 0] * x + B[1, 1] * y + B[1, 2]
    return t.unproject(east, north)


# ---------------------------------------------------------------------------
# field model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldModel:
    rows: np.ndarray
    row_spacing: float
    boundary: np.ndarray
    y_extent: tuple[float, float]
    origin_geo: tuple[float, float]
    survey_geo: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    survey_local: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "survey_geo", np.asarray(self.survey_geo, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "survey_local", np.asarray(self.survey_local, dtype=np.float64).reshape(-1, 2))
        if rows.size == 0:
            raise FieldFileError("field has no rows")
        if rows.size > 1:
            d = np.diff(rows)
            if np.any(d <= 0):
                raise FieldFileError("row x-coordinates must be strictly increasing")
            if np.any(np.abs(d - self.row_spacing) > 0.01 * self.row_spacing):
                raise FieldFileError("row gaps deviate from row_spacing by more than 1%")

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """Cropped-area corners: bed-centre extent across rows, row extent along y."""
        half = self.row_spacing / 2.0
        return (float(self.rows[0] - half), float(self.y_extent[0]),
                float(self.rows[-1] + half), float(self.y_extent[1]))

    def transform(self) -> FieldTransform:
        return fit_field_transform(self.survey_geo, self.survey_local)


def nearest_row(f: FieldModel, x):
    """Index of the closest row centre; ties go to the lower index."""
    idx = nearest_index(f.rows, x)
    return int(idx) if np.ndim(x) == 0 else idx


def point_in_boundary(f: FieldModel, x, y) -> np.ndarray:
    """Boundary-inclusive containment test against the field polygon."""
    poly = shapely.Polygon(f.boundary)
    return shapely.intersects_xy(poly, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    resolution: float
    x_edges: np.ndarray
    y_edges: np.ndarray
    truncated_x: bool = False
    truncated_y: bool = False

    @property
    def x_mid(self) -> np.ndarray:
        return (self.x_edges[:-1] + self.x_edges[1:]) / 2

    @property
    def y_mid(self) -> np.ndarray:
        return (self.y_edges[:-1] + self.y_edges[1:]) / 2

    @property
    def shape(self) -> tuple[int, int]:
        return self.x_edges.size - 1, self.y_edges.size - 1

    def same_as(self, other: "GridSpec") -> bool:
        return (self.resolution == other.resolution
                and np.array_equal(self.x_edges, other.x_edges)
                and np.array_equal(self.y_edges, other.y_edges))


def _edges(lo: float, hi: float, r: float) -> tuple[np.ndarray, bool]:
    n = max(1, math.ceil((hi - lo) / r - 1e-9))
    edges = lo + r * np.arange(n + 1, dtype=np.float64)
    truncated = edges[-1] > hi + 1e-9 * max(1.0, abs(hi))
    edges[-1] = hi
    return edges, bool(truncated)


def make_grid(f: FieldModel, r: float) -> GridSpec:
    if not r > 0:
        raise NonPositiveResolution(f"grid resolution must be positive, got {r}")
    x0, y0, x1, y1 = f.bbox
    xe, tx = _edges(x0, x1, r)
    ye, ty = _edges(y0, y1, r)
    return GridSpec(float(r), xe, ye, tx, ty)


def nearest_index(mids: np.ndarray, v) -> np.ndarray:
    """argmin_j |mids[j] - v| per value, lowest index on ties (mids ascending)."""
    v = np.asarray(v, dtype=np.float64)
    if mids.size == 1:
        return np.zeros(v.shape, dtype=np.int64)
    hi = np.clip(np.searchsorted(mids, v), 1, mids.size - 1)
    lo = hi - 1
    choose_hi = np.abs(mids[hi] - v) < np.abs(mids[lo] - v)
    idx = np.where(choose_hi, hi, lo)
    return idx.astype(np.int64)


# ---------------------------------------------------------------------------
# field file
# ---------------------------------------------------------------------------

FIELD_FILE_DOC = """\
field definition
  row_spacing = <m>
  rows = x0, x1, ...               (local frame, m)
  y_extent = y_min, y_max
  origin_geo = lat, lon
  boundary_vertex = x, y           (repeat, polygon order)
  bed_center = lat, lon, x, y      (repeat, surveyed correspondences)"""


def save_field(f: FieldModel, path: str | os.PathLike) -> None:
    items: list[tuple[str, object]] = [
        ("row_spacing", repr(float(f.row_spacing))),
        ("rows", ", ".join(repr(float(v)) for v in f.rows)),
        ("y_extent", f"{f.y_extent[0]!r}, {f.y_extent[1]!r}"),
        ("origin_geo", f"{f.origin_geo[0]!r}, {f.origin_geo[1]!r}"),
    ]
    items += [("boundary_vertex", f"{float(x)!r}, {float(y)!r}") for x, y in f.boundary]
    items += [
        ("bed_center", f"{float(g[0])!r}, {float(g[1])!r}, {float(p[0])!r}, {float(p[1])!r}")
        for g, p in zip(f.survey_geo, f.survey_local)
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(kvfile.format_kv(items, header=FIELD_FILE_DOC))


def load_field(path: str | os.PathLike) -> FieldModel:
    if not os.path.exists(path):
        raise FieldFileError(f"field file not found: {path}")
    try:
        doc = kvfile.read_kv(path)
        beds = np.array([kvfile.floats(v) for v in doc.get("bed_center", [])]).reshape(-1, 4)
        return FieldModel(
            rows=np.array(kvfile.floats(kvfile.single(doc, "rows"))),
            row_spacing=float(kvfile.single(doc, "row_spacing")),
            boundary=np.array([kvfile.floats(v) for v in doc["boundary_vertex"]]),
            y_extent=tuple(kvfile.floats(kvfile.single(doc, "y_extent"))),
            origin_geo=tuple(kvfile.floats(kvfile.single(doc, "origin_geo"))),
            survey_geo=beds[:, :2],
            survey_local=beds[:, 2:],
        )
    except (KeyError, ValueError) as exc:
        raise FieldFileError(f"malformed field file {path}: {exc}") from exc
