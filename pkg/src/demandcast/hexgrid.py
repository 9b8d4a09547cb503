"""Hexagonal tessellation of a region and per-cell per-slot demand counting.

Cells are pointy-top hexagons addressed by axial coordinates (q, r) laid out
on a local azimuthal-equidistant projection around the region centroid, so a
metric edge length (km) stays meaningful at city scale.  All plane geometry
is in kilometers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

from .errors import (
    ConfigurationError,
    ContractViolationError,
    OutOfGridError,
    OutOfRangeError,
)

EARTH_RADIUS_KM = 6371.0088

# Axial offsets of the six neighbors of a pointy-top hexagon.
AXIAL_NEIGHBOR_OFFSETS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


class LocalProjection:
    """Azimuthal-equidistant projection of WGS84 lat/lon onto a plane in km."""

    def __init__(self, origin_lat: float, origin_lon: float):
        self.origin_lat = float(origin_lat)
        self.origin_lon = float(origin_lon)
        self._phi0 = math.radians(self.origin_lat)
        self._lam0 = math.radians(self.origin_lon)
        self._sin_phi0 = math.sin(self._phi0)
        self._cos_phi0 = math.cos(self._phi0)

    def forward(self, lat: float, lon: float) -> tuple[float, float]:
        phi = math.radians(lat)
        lam = math.radians(lon)
        dlam = lam - self._lam0
        cos_c = self._sin_phi0 * math.sin(phi) + self._cos_phi0 * math.cos(phi) * math.cos(dlam)
        cos_c = min(1.0, max(-1.0, cos_c))
        c = math.acos(cos_c)
        if c < 1e-12:
            k = EARTH_RADIUS_KM
        else:
            k = EARTH_RADIUS_KM * c / math.sin(c)
        x = k * math.cos(phi) * math.sin(dlam)
        y = k * (self._cos_phi0 * math.sin(phi) - self._sin_phi0 * math.cos(phi) * math.cos(dlam))
        return x, y

    def inverse(self, x: float, y: float) -> tuple[float, float]:
        rho = math.hypot(x, y)
        if rho < 1e-12:
            return self.origin_lat, self.origin_lon
        c = rho / EARTH_RADIUS_KM
        sin_c, cos_c = math.sin(c), math.cos(c)
        phi = math.asin(cos_c * self._sin_phi0 + y * sin_c * self._cos_phi0 / rho)
        lam = self._lam0 + math.atan2(
            x * sin_c, rho * self._cos_phi0 * cos_c - y * self._sin_phi0 * sin_c
        )
        return math.degrees(phi), math.degrees(lam)


def axial_to_plane(q: int, r: int, edge_km: float) -> tuple[float, float]:
    """Centroid of the pointy-top hexagon at axial (q, r)."""
    x = edge_km * math.sqrt(3.0) * (q + r / 2.0)
    y = edge_km * 1.5 * r
    return x, y


def plane_to_axial_frac(x: float, y: float, edge_km: float) -> tuple[float, float]:
    q = (math.sqrt(3.0) / 3.0 * x - y / 3.0) / edge_km
    r = (2.0 / 3.0 * y) / edge_km
    return q, r


def axial_round(qf: float, rf: float) -> tuple[int, int]:
    """Round fractional axial coordinates to the containing hexagon (cube rounding)."""
    xf, zf = qf, rf
    yf = -xf - zf
    rx, ry, rz = round(xf), round(yf), round(zf)
    dx, dy, dz = abs(rx - xf), abs(ry - yf), abs(rz - zf)
    if dx > dy and dx > dz:
        rx = -ry - rz
    elif dy > dz:
        ry = -rx - rz
    else:
        rz = -rx - ry
    return int(rx), int(rz)


def hex_corners(cx: float, cy: float, edge_km: float) -> list[tuple[float, float]]:
    """Six corners of a pointy-top hexagon centered at (cx, cy)."""
    corners = []
    for i in range(6):
        angle = math.radians(60.0 * i - 30.0)
        corners.append((cx + edge_km * math.cos(angle), cy + edge_km * math.sin(angle)))
    return corners


def validate_polygon(vertices: list[tuple[float, float]]) -> ShapelyPolygon:
    """Check a (lat, lon) vertex list is a simple polygon with positive area."""
    if len(vertices) < 3:
        raise ConfigurationError(f"polygon needs >=3 vertices, got {len(vertices)}")
    poly = ShapelyPolygon([(lon, lat) for lat, lon in vertices])
    if not poly.is_valid:
        raise ConfigurationError("polygon is not simple (self-intersecting or degenerate)")
    if poly.area <= 0.0:
        raise ConfigurationError("polygon has zero area")
    return poly


@dataclass(frozen=True)
class HexGrid:
    """Immutable hexagonal tessellation covering a bounding polygon.

    Cell ids are dense integers assigned in (r, q) order; centroids are stored
    both in local plane km and as inverse-projected lat/lon.
    """

    origin: tuple[float, float]               # projection anchor (lat, lon)
    edge_km: float
    axial: np.ndarray                         # [V, 2] int, columns (q, r)
    centroids_xy: np.ndarray                  # [V, 2] float km
    centroids_latlon: np.ndarray              # [V, 2] float degrees (lat, lon)
    bbox: tuple[tuple[float, float], ...]     # covering polygon vertices (lat, lon)
    _axial_index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        index = {(int(q), int(r)): i for i, (q, r) in enumerate(self.axial)}
        object.__setattr__(self, "_axial_index", index)

    @property
    def n_cells(self) -> int:
        return len(self.axial)

    @property
    def projection(self) -> LocalProjection:
        return LocalProjection(*self.origin)

    def cell_at_axial(self, q: int, r: int) -> int | None:
        return self._axial_index.get((q, r))

    def neighbors(self, cell_id: int) -> list[int]:
        q, r = (int(v) for v in self.axial[cell_id])
        out = []
        for dq, dr in AXIAL_NEIGHBOR_OFFSETS:
            j = self.cell_at_axial(q + dq, r + dr)
            if j is not None:
                out.append(j)
        return out

    def interior_cells(self) -> list[int]:
        """Cells whose six axial neighbors all exist in the grid."""
        return [i for i in range(self.n_cells) if len(self.neighbors(i)) == 6]

    def to_json_dict(self) -> dict:
        return {
            "origin": [self.origin[0], self.origin[1]],
            "edge_km": self.edge_km,
            "axial": [[int(q), int(r)] for q, r in self.axial],
            "bbox": [[lat, lon] for lat, lon in self.bbox],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "HexGrid":
        origin = (float(doc["origin"][0]), float(doc["origin"][1]))
        edge_km = float(doc["edge_km"])
        axial = np.array(doc["axial"], dtype=np.int64).reshape(-1, 2)
        bbox = tuple((float(a), float(b)) for a, b in doc["bbox"])
        proj = LocalProjection(*origin)
        xy = np.array([axial_to_plane(q, r, edge_km) for q, r in axial], dtype=float)
        latlon = np.array([proj.inverse(x, y) for x, y in xy], dtype=float)
        return cls(origin=origin, edge_km=edge_km, axial=axial,
                   centroids_xy=xy, centroids_latlon=latlon, bbox=bbox)


def build_hex_grid(bbox: list[tuple[float, float]], edge_km: float) -> HexGrid:
    """Tessellate the bounding polygon with pointy-top hexagons.

    Every hexagon intersecting the polygon is included, so the grid covers it
    entirely (boundary cells may overhang).  Deterministic: ids follow (r, q)
    order of the axial coordinates.
    """
    if edge_km <= 0:
        raise ConfigurationError(f"edge_km must be positive, got {edge_km}")
    validate_polygon(list(bbox))

    lat0 = sum(lat for lat, _ in bbox) / len(bbox)
    lon0 = sum(lon for _, lon in bbox) / len(bbox)
    proj = LocalProjection(lat0, lon0)
    plane_poly = ShapelyPolygon([proj.forward(lat, lon) for lat, lon in bbox])
    if plane_poly.area <= 0.0:
        raise ConfigurationError("polygon degenerates to zero area in local projection")

    minx, miny, maxx, maxy = plane_poly.bounds
    # Candidate axial range padded by one hexagon so no intersecting cell is missed.
    r_lo = math.floor((miny - edge_km) / (1.5 * edge_km)) - 1
    r_hi = math.ceil((maxy + edge_km) / (1.5 * edge_km)) + 1
    w = math.sqrt(3.0) * edge_km
    cells: list[tuple[int, int]] = []
    for r in range(r_lo, r_hi + 1):
        q_lo = math.floor((minx - w) / w - r / 2.0) - 1
        q_hi = math.ceil((maxx + w) / w - r / 2.0) + 1
        for q in range(q_lo, q_hi + 1):
            cx, cy = axial_to_plane(q, r, edge_km)
            hexagon = ShapelyPolygon(hex_corners(cx, cy, edge_km))
            if hexagon.intersects(plane_poly):
                cells.append((q, r))

    if not cells:
        raise ConfigurationError("polygon produced an empty grid")
    cells.sort(key=lambda qr: (qr[1], qr[0]))
    axial = np.array(cells, dtype=np.int64)
    xy = np.array([axial_to_plane(q, r, edge_km) for q, r in cells], dtype=float)
    latlon = np.array([proj.inverse(x, y) for x, y in xy], dtype=float)
    return HexGrid(
        origin=(lat0, lon0),
        edge_km=edge_km,
        axial=axial,
        centroids_xy=xy,
        centroids_latlon=latlon,
        bbox=tuple((float(lat), float(lon)) for lat, lon in bbox),
    )


def locate_cell(grid: HexGrid, lat: float, lon: float) -> int:
    """Cell whose hexagon contains the point; smallest id wins on shared edges."""
    x, y = grid.projection.forward(lat, lon)
    q0, r0 = axial_round(*plane_to_axial_frac(x, y, grid.edge_km))

    # The containing hexagon is the lattice position with the nearest centroid
    # (hexagons are the Voronoi cells of the lattice).  Edge/corner points tie.
    candidates = [(q0, r0)] + [(q0 + dq, r0 + dr) for dq, dr in AXIAL_NEIGHBOR_OFFSETS]
    dists = []
    for q, r in candidates:
        cx, cy = axial_to_plane(q, r, grid.edge_km)
        dists.append(math.hypot(x - cx, y - cy))
    dmin = min(dists)
    tol = 1e-9 * grid.edge_km
    containing = [
        grid.cell_at_axial(q, r)
        for (q, r), d in zip(candidates, dists)
        if d <= dmin + tol
    ]
    existing = [c for c in containing if c is not None]
    if not existing:
        raise OutOfGridError(f"point ({lat}, {lon}) is outside the grid coverage")
    return min(existing)


@dataclass(frozen=True)
class SlotIndex:
    """Time slot ordinal within equal-width intervals starting at an epoch."""

    k: int
    interval_min: int
    epoch: datetime

    def start(self) -> datetime:
        return self.epoch + timedelta(minutes=self.k * self.interval_min)


def bin_time(ts: datetime, interval_min: int, epoch: datetime) -> SlotIndex:
    """Slot index of ts: floor((ts - epoch) / interval), left-closed right-open."""
    if ts.tzinfo is None or epoch.tzinfo is None:
        raise ContractViolationError("bin_time requires timezone-aware datetimes")
    delta = (ts - epoch).total_seconds()
    if delta < 0:
        raise OutOfRangeError(f"timestamp {ts.isoformat()} precedes epoch {epoch.isoformat()}")
    k = int(delta // (interval_min * 60))
    return SlotIndex(k=k, interval_min=interval_min, epoch=epoch)


@dataclass
class DemandTensor:
    """Pickup counts per (cell, slot) for one region."""

    region_id: str
    values: np.ndarray          # [V, K] int64, all >= 0
    grid: HexGrid
    interval_min: int
    epoch: datetime             # UTC start of slot 0
    tz: str = "UTC"             # IANA zone for day-of-week / time-of-day features

    @property
    def n_slots(self) -> int:
        return self.values.shape[1]

    def total(self) -> int:
        return int(self.values.sum())


def count_demand(
    region,
    grid: HexGrid,
    interval_min: int,
    epoch: datetime,
    n_slots: int,
) -> tuple[DemandTensor, dict]:
    """Aggregate a region's trips into a [cells x slots] pickup-count tensor.

    Trips outside [epoch, epoch + n_slots * interval) are excluded and counted
    in the returned report, as are pickups that miss the grid (possible only
    if the grid does not cover the region polygon).
    """
    values = np.zeros((grid.n_cells, n_slots), dtype=np.int64)
    report = {"counted": 0, "out_of_window": 0, "out_of_grid": 0}
    for trip in region.trips:
        if trip.pickup_time < epoch:
            report["out_of_window"] += 1
            continue
        slot = bin_time(trip.pickup_time, interval_min, epoch)
        if slot.k >= n_slots:
            report["out_of_window"] += 1
            continue
        try:
            cell = locate_cell(grid, trip.pickup_lat, trip.pickup_lon)
        except OutOfGridError:
            report["out_of_grid"] += 1
            continue
        values[cell, slot.k] += 1
        report["counted"] += 1
    tensor = DemandTensor(
        region_id=region.region_id,
        values=values,
        grid=grid,
        interval_min=interval_min,
        epoch=epoch,
        tz=getattr(region, "tz", "UTC"),
    )
    return tensor, report


def save_demand(tensor: DemandTensor, out_dir: str | Path) -> None:
    """Write grid.json, demand.csv (cell_id,slot,count long format) and meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps(tensor.grid.to_json_dict()))
    meta = {
        "region_id": tensor.region_id,
        "interval_min": tensor.interval_min,
        "epoch": tensor.epoch.astimezone(timezone.utc).isoformat(),
        "tz": tensor.tz,
        "n_cells": int(tensor.values.shape[0]),
        "n_slots": int(tensor.values.shape[1]),
    }
    (out / "meta.json").write_text(json.dumps(meta))
    cells, slots = np.nonzero(tensor.values)
    with open(out / "demand.csv", "w") as fh:
        fh.write("cell_id,slot,count\n")
        for c, k in zip(cells, slots):
            fh.write(f"{c},{k},{tensor.values[c, k]}\n")


def load_demand(in_dir: str | Path) -> DemandTensor:
    src = Path(in_dir)
    grid = HexGrid.from_json_dict(json.loads((src / "grid.json").read_text()))
    meta = json.loads((src / "meta.json").read_text())
    values = np.zeros((meta["n_cells"], meta["n_slots"]), dtype=np.int64)
    with open(src / "demand.csv") as fh:
        header = fh.readline()
        if header.strip() != "cell_id,slot,count":
            raise ConfigurationError(f"unexpected demand.csv header: {header!r}")
        for line in fh:
            c, k, n = line.strip().split(",")
            values[int(c), int(k)] = int(n)
    return DemandTensor(
        region_id=meta["region_id"],
        values=values,
        grid=grid,
        interval_min=int(meta["interval_min"]),
        epoch=datetime.fromisoformat(meta["epoch"]),
        tz=meta["tz"],
    )
