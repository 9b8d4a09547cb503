"""Seeded multi-region synthetic trip generator.

Every region draws per-(cell, slot) trip counts from independent Poissons
whose rate factorizes into a daily profile shared across regions and a
region-specific style (spatial hotspots, intensity scale, phase shift).
The shared part is what a cross-region model should learn; the style part
is what the region-specific latent should absorb.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import ConfigurationError
from .hexgrid import HexGrid, LocalProjection, axial_round, build_hex_grid, plane_to_axial_frac
from .trips import RegionDataset, TripRecord

# Monday, so default grids align day-of-week features with weekday index 0.
SYNTH_EPOCH = datetime(2024, 1, 1, 0, 0, 0, tzinfo=timezone.utc)

_BASE_ORIGIN = (40.0, -100.0)
_ORIGIN_STEP_DEG = 1.0


@dataclass(frozen=True)
class RegionStyle:
    """Region-specific demand character the model should disentangle."""

    hotspot_centers: tuple[tuple[float, float], ...]  # relative (x, y) in [0,1]^2
    hotspot_sigma_km: float = 2.5
    intensity_scale: float = 1.0
    phase_shift_slots: int = 0


def _default_profile(slots_per_day: int) -> tuple[float, ...]:
    """Bimodal commuter curve (morning/evening peaks), normalized to mean 1."""
    hours = np.arange(slots_per_day) * (24.0 / slots_per_day)
    curve = (
        0.30
        + 1.20 * np.exp(-((hours - 8.5) ** 2) / (2 * 1.5**2))
        + 1.50 * np.exp(-((hours - 18.5) ** 2) / (2 * 2.0**2))
    )
    curve /= curve.mean()
    return tuple(float(v) for v in curve)


def _default_styles(n_regions: int) -> tuple[RegionStyle, ...]:
    presets = [
        RegionStyle(hotspot_centers=((0.30, 0.30),), intensity_scale=1.0, phase_shift_slots=0),
        RegionStyle(hotspot_centers=((0.70, 0.60),), intensity_scale=1.5, phase_shift_slots=3),
        RegionStyle(
            hotspot_centers=((0.20, 0.80), (0.80, 0.20)),
            intensity_scale=0.7,
            phase_shift_slots=-2,
        ),
        RegionStyle(hotspot_centers=((0.60, 0.35),), intensity_scale=1.2, phase_shift_slots=1),
    ]
    if n_regions <= len(presets):
        return tuple(presets[:n_regions])
    extra = []
    for i in range(len(presets), n_regions):
        ang = 2.0 * math.pi * i / n_regions
        extra.append(
            RegionStyle(
                hotspot_centers=((0.5 + 0.3 * math.cos(ang), 0.5 + 0.3 * math.sin(ang)),),
                intensity_scale=0.8 + 0.15 * i,
                phase_shift_slots=(i % 5) - 2,
            )
        )
    return tuple(presets + extra)


@dataclass
class SynthConfig:
    n_regions: int = 4
    grid_diameter_cells: int = 8
    days: int = 14
    interval_min: int = 30
    edge_km: float = 1.4
    base_intensity: float = 1.2          # mean trips per slot per unit-kernel cell
    kernel_floor: float = 0.25
    hotspot_gain: float = 2.5
    shared_daily_profile: tuple[float, ...] = field(default_factory=tuple)
    region_styles: tuple[RegionStyle, ...] = field(default_factory=tuple)
    seed: int = 7

    def __post_init__(self):
        if 1440 % self.interval_min != 0:
            raise ConfigurationError("interval_min must divide 1440")
        if not self.shared_daily_profile:
            self.shared_daily_profile = _default_profile(self.slots_per_day)
        if len(self.shared_daily_profile) != self.slots_per_day:
            raise ConfigurationError(
                f"profile length {len(self.shared_daily_profile)} != "
                f"slots per day {self.slots_per_day}"
            )
        if any(v < 0 for v in self.shared_daily_profile):
            raise ConfigurationError("profile multipliers must be >= 0")
        if not self.region_styles:
            self.region_styles = _default_styles(self.n_regions)
        if len(self.region_styles) != self.n_regions:
            raise ConfigurationError("need one RegionStyle per region")
        if self.base_intensity < 0:
            raise ConfigurationError("base_intensity must be >= 0")

    @property
    def slots_per_day(self) -> int:
        return 1440 // self.interval_min

    @property
    def n_slots(self) -> int:
        return self.days * self.slots_per_day

    def region_ids(self) -> list[str]:
        return [f"R{i}" for i in range(self.n_regions)]


def region_origin(config: SynthConfig, region_index: int) -> tuple[float, float]:
    return (_BASE_ORIGIN[0], _BASE_ORIGIN[1] + _ORIGIN_STEP_DEG * region_index)


def region_polygon(config: SynthConfig, region_index: int) -> list[tuple[float, float]]:
    """Circular region outline, diameter measured in cell widths."""
    lat0, lon0 = region_origin(config, region_index)
    proj = LocalProjection(lat0, lon0)
    width_km = math.sqrt(3.0) * config.edge_km
    radius_km = 0.5 * (config.grid_diameter_cells - 1) * width_km
    verts = []
    for i in range(72):
        ang = 2.0 * math.pi * i / 72
        verts.append(proj.inverse(radius_km * math.cos(ang), radius_km * math.sin(ang)))
    return verts


def region_grid(config: SynthConfig, region_index: int) -> HexGrid:
    return build_hex_grid(region_polygon(config, region_index), config.edge_km)


def _spatial_kernel(config: SynthConfig, grid: HexGrid, style: RegionStyle) -> np.ndarray:
    """Per-cell multiplier: floor + Gaussian bumps at the hotspot centers."""
    xy = grid.centroids_xy
    xmin, ymin = xy.min(axis=0)
    xmax, ymax = xy.max(axis=0)
    kernel = np.full(grid.n_cells, config.kernel_floor)
    for cx_rel, cy_rel in style.hotspot_centers:
        cx = xmin + cx_rel * (xmax - xmin)
        cy = ymin + cy_rel * (ymax - ymin)
        d2 = (xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2
        kernel = kernel + config.hotspot_gain * np.exp(-d2 / (2.0 * style.hotspot_sigma_km**2))
    return kernel


def rate_matrix(config: SynthConfig, region_index: int, grid: HexGrid | None = None) -> np.ndarray:
    """Exact generating rates lambda[cell, slot] for one region."""
    if region_index >= config.n_regions:
        raise ConfigurationError(f"region index {region_index} >= {config.n_regions}")
    if grid is None:
        grid = region_grid(config, region_index)
    style = config.region_styles[region_index]
    spd = config.slots_per_day
    profile = np.array(config.shared_daily_profile)
    slot_factor = profile[(np.arange(config.n_slots) + style.phase_shift_slots) % spd]
    kernel = _spatial_kernel(config, grid, style)
    return config.base_intensity * style.intensity_scale * np.outer(kernel, slot_factor)


def oracle_expected_demand(
    config: SynthConfig, region_index: int, cell: int, slot: int
) -> float:
    """The true Poisson rate behind (cell, slot); the acceptance-test oracle."""
    return float(rate_matrix(config, region_index)[cell, slot])


def draw_counts(config: SynthConfig, region_index: int) -> tuple[HexGrid, np.ndarray]:
    """The grid and the Poisson count draws [V, K] behind generate_region."""
    grid = region_grid(config, region_index)
    rates = rate_matrix(config, region_index, grid)
    seq = np.random.SeedSequence(config.seed).spawn(config.n_regions)[region_index]
    counts_rng = np.random.default_rng(seq.spawn(2)[0])
    counts = counts_rng.poisson(rates)
    return grid, counts


def _jitter_in_cell(
    grid: HexGrid, cell: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Uniform point strictly inside the cell's hexagon, as (lat, lon).

    The candidate is accepted only if a copy inflated by 0.1% about the
    centroid still rounds into the same cell, leaving a meter-scale margin so
    projection round-trips cannot flip the containing cell.
    """
    cx, cy = grid.centroids_xy[cell]
    q, r = (int(v) for v in grid.axial[cell])
    s = grid.edge_km
    w = math.sqrt(3.0) / 2.0 * s
    proj = grid.projection
    while True:
        dx = rng.uniform(-w, w)
        dy = rng.uniform(-s, s)
        inflated = plane_to_axial_frac(cx + 1.001 * dx, cy + 1.001 * dy, s)
        if axial_round(*inflated) == (q, r):
            return proj.inverse(cx + dx, cy + dy)


def generate_region(config: SynthConfig, region_index: int) -> RegionDataset:
    """Materialize trip records for one region, deterministically per seed.

    Pickups are jittered inside their cell and uniformly in their slot;
    dropoffs land in a random existing neighbor cell a few minutes later.
    """
    grid, counts = draw_counts(config, region_index)
    seq = np.random.SeedSequence(config.seed).spawn(config.n_regions)[region_index]
    jitter_rng = np.random.default_rng(seq.spawn(2)[1])
    interval_s = config.interval_min * 60

    trips: list[TripRecord] = []
    neighbor_cache = [grid.neighbors(i) or [i] for i in range(grid.n_cells)]
    for cell in range(grid.n_cells):
        for slot in range(config.n_slots):
            n = int(counts[cell, slot])
            if n == 0:
                continue
            slot_start = SYNTH_EPOCH + timedelta(seconds=slot * interval_s)
            for _ in range(n):
                p_lat, p_lon = _jitter_in_cell(grid, cell, jitter_rng)
                offset = int(jitter_rng.uniform(0.0, interval_s))
                pickup_time = slot_start + timedelta(seconds=min(offset, interval_s - 1))
                nbrs = neighbor_cache[cell]
                d_cell = nbrs[int(jitter_rng.integers(len(nbrs)))]
                d_lat, d_lon = _jitter_in_cell(grid, d_cell, jitter_rng)
                duration = int(jitter_rng.uniform(180.0, 900.0))
                trips.append(
                    TripRecord(
                        pickup_time=pickup_time,
                        pickup_lat=p_lat,
                        pickup_lon=p_lon,
                        dropoff_lat=d_lat,
                        dropoff_lon=d_lon,
                        dropoff_time=pickup_time + timedelta(seconds=duration),
                    )
                )
    trips.sort(key=lambda t: t.pickup_time)

    # The covering polygon spans all grid cells, so every jittered pickup is
    # inside and clipping is a no-op for generated data.
    pad = 2.0 * grid.edge_km
    xs, ys = grid.centroids_xy[:, 0], grid.centroids_xy[:, 1]
    proj = grid.projection
    corners_xy = [
        (xs.min() - pad, ys.min() - pad),
        (xs.max() + pad, ys.min() - pad),
        (xs.max() + pad, ys.max() + pad),
        (xs.min() - pad, ys.max() + pad),
    ]
    polygon = [proj.inverse(x, y) for x, y in corners_xy]
    return RegionDataset(
        region_id=config.region_ids()[region_index],
        bounding_polygon=polygon,
        trips=trips,
        tz="UTC",
    )
