"""Parse heterogeneous open taxi-trip datasets into one canonical record stream.

Each public-dataset dialect is a thin column-mapping adapter onto the
canonical CSV interchange format:

    pickup_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,dropoff_time

with ISO-8601 UTC timestamps at seconds precision and optional dropoff
fields.  Malformed rows are skipped and counted, never fatal below a 50%
threshold.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator
from zoneinfo import ZoneInfo

from shapely.geometry import Point
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.prepared import prep

from .errors import ConfigurationError, DataQualityError
from .hexgrid import validate_polygon

CANONICAL_HEADER = "pickup_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,dropoff_time"

DIALECTS = ("canonical_csv", "nyc_yellow", "chicago", "sf_cabspotting")

# Source-local timezones; timestamps are normalized to UTC at parse time.
DIALECT_TIMEZONES = {
    "canonical_csv": "UTC",
    "nyc_yellow": "America/New_York",
    "chicago": "America/Chicago",
    "sf_cabspotting": "UTC",  # raw unix epoch seconds
}


@dataclass(frozen=True)
class TripRecord:
    """One validated taxi pickup (and optional dropoff) event."""

    pickup_time: datetime
    pickup_lat: float
    pickup_lon: float
    dropoff_lat: float | None = None
    dropoff_lon: float | None = None
    dropoff_time: datetime | None = None

    def __post_init__(self):
        _check_coord(self.pickup_lat, self.pickup_lon)
        has_drop = self.dropoff_lat is not None or self.dropoff_lon is not None
        if has_drop:
            if self.dropoff_lat is None or self.dropoff_lon is None:
                raise ValueError("dropoff coordinates must be both present or both absent")
            _check_coord(self.dropoff_lat, self.dropoff_lon)
        if self.dropoff_time is not None and self.dropoff_time < self.pickup_time:
            raise ValueError("dropoff_time precedes pickup_time")


def _check_coord(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0):
        raise ValueError(f"latitude {lat} out of [-90, 90]")
    if not (-180.0 <= lon <= 180.0):
        raise ValueError(f"longitude {lon} out of [-180, 180]")


@dataclass
class RegionDataset:
    """All trips of one region, clipped to its bounding polygon."""

    region_id: str
    bounding_polygon: list[tuple[float, float]]
    trips: list[TripRecord]
    tz: str = "UTC"


@dataclass
class IngestReport:
    """Counters from one parse/clip pass, serializable as JSON."""

    dialect: str = ""
    parsed: int = 0
    skipped_malformed: int = 0
    retained: int = 0
    dropped_outside: int = 0
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def _open_text(source) -> Iterator[str]:
    """Yield lines from a path (optionally .gz), byte stream, or text stream."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.is_dir():
            raise IsADirectoryError(f"{path} is a directory")
        if path.suffix == ".gz":
            with gzip.open(path, "rt") as fh:
                yield from fh
        else:
            with open(path, "rt") as fh:
                yield from fh
    elif isinstance(source, (bytes, bytearray)):
        yield from io.StringIO(source.decode())
    elif hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode()
        yield from io.StringIO(data)
    else:
        raise ConfigurationError(f"unreadable source type: {type(source)!r}")


def _parse_ts_utc(text: str, fmt: str | None, tz: ZoneInfo) -> datetime:
    if fmt is None:
        ts = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    else:
        ts = datetime.strptime(text.strip(), fmt)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=tz)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_canonical(trip: TripRecord) -> str:
    def ts(t: datetime | None) -> str:
        return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ") if t else ""

    def num(v: float | None) -> str:
        return repr(v) if v is not None else ""

    return ",".join([
        ts(trip.pickup_time),
        repr(trip.pickup_lat),
        repr(trip.pickup_lon),
        num(trip.dropoff_lat),
        num(trip.dropoff_lon),
        ts(trip.dropoff_time),
    ])


def write_canonical(trips: Iterable[TripRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w") as fh:
        fh.write(CANONICAL_HEADER + "\n")
        for trip in trips:
            fh.write(format_canonical(trip) + "\n")
            n += 1
    return n


def _rows_canonical(lines: Iterator[str], report: IngestReport) -> Iterator[TripRecord]:
    tz = ZoneInfo("UTC")
    for row in csv.reader(lines):
        if not row or row[0].strip() == "pickup_time":
            continue
        try:
            if len(row) != 6:
                raise ValueError(f"expected 6 columns, got {len(row)}")
            pickup = _parse_ts_utc(row[0], None, tz)
            drop_lat = float(row[3]) if row[3].strip() else None
            drop_lon = float(row[4]) if row[4].strip() else None
            drop_ts = _parse_ts_utc(row[5], None, tz) if row[5].strip() else None
            trip = TripRecord(pickup, float(row[1]), float(row[2]), drop_lat, drop_lon, drop_ts)
        except (ValueError, TypeError):
            report.skipped_malformed += 1
            continue
        yield trip


def _rows_nyc_yellow(lines: Iterator[str], report: IngestReport) -> Iterator[TripRecord]:
    tz = ZoneInfo(DIALECT_TIMEZONES["nyc_yellow"])
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        return
    cols = {c.strip().lower(): c for c in reader.fieldnames}

    def col(*names):
        for n in names:
            if n in cols:
                return cols[n]
        raise ConfigurationError(f"nyc_yellow source missing column, tried {names}")

    c_pt = col("tpep_pickup_datetime", "pickup_datetime")
    c_dt = col("tpep_dropoff_datetime", "dropoff_datetime")
    c_plat = col("pickup_latitude")
    c_plon = col("pickup_longitude")
    c_dlat = col("dropoff_latitude")
    c_dlon = col("dropoff_longitude")
    fmt = "%Y-%m-%d %H:%M:%S"
    for row in reader:
        try:
            pickup = _parse_ts_utc(row[c_pt], fmt, tz)
            drop = _parse_ts_utc(row[c_dt], fmt, tz) if row[c_dt].strip() else None
            trip = TripRecord(
                pickup,
                float(row[c_plat]),
                float(row[c_plon]),
                float(row[c_dlat]) if row[c_dlat].strip() else None,
                float(row[c_dlon]) if row[c_dlon].strip() else None,
                drop,
            )
        except (ValueError, TypeError, KeyError):
            report.skipped_malformed += 1
            continue
        yield trip


def _rows_chicago(lines: Iterator[str], report: IngestReport) -> Iterator[TripRecord]:
    tz = ZoneInfo(DIALECT_TIMEZONES["chicago"])
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        return
    cols = {c.strip().lower(): c for c in reader.fieldnames}

    def col(name):
        if name not in cols:
            raise ConfigurationError(f"chicago source missing column {name!r}")
        return cols[name]

    c_pt = col("trip start timestamp")
    c_dt = col("trip end timestamp")
    c_plat = col("pickup centroid latitude")
    c_plon = col("pickup centroid longitude")
    c_dlat = col("dropoff centroid latitude")
    c_dlon = col("dropoff centroid longitude")
    fmt = "%m/%d/%Y %I:%M:%S %p"
    for row in reader:
        try:
            pickup = _parse_ts_utc(row[c_pt], fmt, tz)
            drop = _parse_ts_utc(row[c_dt], fmt, tz) if row[c_dt].strip() else None
            trip = TripRecord(
                pickup,
                float(row[c_plat]),
                float(row[c_plon]),
                float(row[c_dlat]) if row[c_dlat].strip() else None,
                float(row[c_dlon]) if row[c_dlon].strip() else None,
                drop,
            )
        except (ValueError, TypeError, KeyError):
            report.skipped_malformed += 1
            continue
        yield trip


def _rows_cabspotting(lines: Iterator[str], report: IngestReport) -> Iterator[TripRecord]:
    """Decode one cab's occupancy trace: "lat lon occupied unix_time" per line.

    A passenger trip starts at the free->occupied transition; the pickup is
    recorded at the last free fix (where the cab was hailed), falling back to
    the first occupied fix if the trace starts mid-trip.  The dropoff is the
    last occupied fix before the cab frees up again.  Raw traces are ordered
    newest-first, so fixes are sorted chronologically before decoding.
    """
    fixes = []
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, got {len(parts)}")
            lat, lon = float(parts[0]), float(parts[1])
            _check_coord(lat, lon)
            occupied = int(parts[2])
            if occupied not in (0, 1):
                raise ValueError("occupancy flag must be 0 or 1")
            ts = datetime.fromtimestamp(int(parts[3]), tz=timezone.utc)
        except (ValueError, OverflowError):
            report.skipped_malformed += 1
            continue
        fixes.append((ts, lat, lon, occupied))
    fixes.sort(key=lambda f: f[0])

    pickup: tuple | None = None
    last_occupied: tuple | None = None
    prev_occ = None
    for ts, lat, lon, occ in fixes:
        if occ == 1:
            if prev_occ != 1:
                pickup = pickup if prev_occ == 0 else (ts, lat, lon)
            last_occupied = (ts, lat, lon)
        else:
            if prev_occ == 1 and pickup is not None and last_occupied is not None:
                yield TripRecord(
                    pickup_time=pickup[0], pickup_lat=pickup[1], pickup_lon=pickup[2],
                    dropoff_lat=last_occupied[1], dropoff_lon=last_occupied[2],
                    dropoff_time=last_occupied[0],
                )
            pickup = (ts, lat, lon)  # candidate hail point for the next trip
        prev_occ = occ
    if prev_occ == 1 and pickup is not None:
        # Trace ends mid-trip: keep the pickup, dropoff unknown.
        yield TripRecord(pickup_time=pickup[0], pickup_lat=pickup[1], pickup_lon=pickup[2])


_ROW_PARSERS = {
    "canonical_csv": _rows_canonical,
    "nyc_yellow": _rows_nyc_yellow,
    "chicago": _rows_chicago,
}


def parse_trip_records(
    source,
    dialect: str,
    report: IngestReport | None = None,
    malformed_threshold: float = 0.5,
) -> Iterator[TripRecord]:
    """Stream TripRecords from a source file/stream in the given dialect.

    Malformed rows are counted and skipped.  If more than
    ``malformed_threshold`` of rows are malformed, a DataQualityError is
    raised at the end of the stream.
    """
    if dialect not in DIALECTS:
        raise ConfigurationError(f"unknown dialect {dialect!r}, expected one of {DIALECTS}")
    rep = report if report is not None else IngestReport()
    rep.dialect = dialect

    if dialect == "sf_cabspotting":
        # Transition decoding needs whole-trace context; a directory input is
        # treated as one trace file per cab.
        if isinstance(source, (str, Path)) and Path(source).is_dir():
            for sub in sorted(Path(source).iterdir()):
                if sub.is_file():
                    yield from parse_trip_records(sub, dialect, rep, malformed_threshold)
            return
        for trip in _rows_cabspotting(_open_text(source), rep):
            rep.parsed += 1
            yield trip
        return

    for trip in _ROW_PARSERS[dialect](_open_text(source), rep):
        rep.parsed += 1
        yield trip

    total = rep.parsed + rep.skipped_malformed
    if total > 0 and rep.skipped_malformed / total > malformed_threshold:
        raise DataQualityError(
            f"{rep.skipped_malformed}/{total} rows malformed exceeds "
            f"{malformed_threshold:.0%} threshold",
            counts={"parsed": rep.parsed, "skipped_malformed": rep.skipped_malformed},
        )


def clip_to_region(
    trips: Iterable[TripRecord],
    polygon: list[tuple[float, float]],
    region_id: str = "region",
    tz: str = "UTC",
    report: IngestReport | None = None,
) -> RegionDataset:
    """Keep exactly the trips whose pickup lies inside or on the polygon."""
    shp = validate_polygon(list(polygon))
    prepared = prep(shp)
    retained: list[TripRecord] = []
    dropped = 0
    for trip in trips:
        # covers() includes the boundary, matching the stated convention.
        if prepared.covers(Point(trip.pickup_lon, trip.pickup_lat)):
            retained.append(trip)
        else:
            dropped += 1
    if report is not None:
        report.retained = len(retained)
        report.dropped_outside = dropped
    return RegionDataset(
        region_id=region_id,
        bounding_polygon=[(float(a), float(b)) for a, b in polygon],
        trips=retained,
        tz=tz,
    )


def load_polygon(path: str | Path) -> list[tuple[float, float]]:
    """Read a polygon from GeoJSON (lon,lat order) or a bare [[lat,lon],...] list."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        if doc.get("type") == "FeatureCollection":
            doc = doc["features"][0]["geometry"]
        elif doc.get("type") == "Feature":
            doc = doc["geometry"]
        if doc.get("type") != "Polygon":
            raise ConfigurationError(f"expected GeoJSON Polygon, got {doc.get('type')!r}")
        ring = doc["coordinates"][0]
        return [(float(lat), float(lon)) for lon, lat in ring]
    if isinstance(doc, list):
        return [(float(lat), float(lon)) for lat, lon in doc]
    raise ConfigurationError("polygon file must be GeoJSON or a [[lat, lon], ...] list")
