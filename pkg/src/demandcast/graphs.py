"""Turn demand tensors into model-ready graph samples.

One sample couples a node feature matrix at slot t, a traffic-weighted
renormalized adjacency, and the next-slot demand as the regression target.
Feature width is fully determined by the FeatureSpec, so samples from
different regions are dimensionally compatible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from datetime import timedelta
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from .errors import (
    ContractViolationError,
    InsufficientHistoryError,
    NoTargetError,
    OutOfGridError,
)
from .hexgrid import AXIAL_NEIGHBOR_OFFSETS, DemandTensor, HexGrid, locate_cell

SNAPSHOT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureSpec:
    """Node feature layout shared by every region in one experiment."""

    h: int = 6
    include_day_onehot: bool = True
    include_slot_encoding: bool = True
    include_relative_coords: bool = True
    external_dims: int = 0

    def __post_init__(self):
        if self.h < 1:
            raise ContractViolationError(f"history length h must be >= 1, got {self.h}")
        if self.external_dims < 0:
            raise ContractViolationError("external_dims must be >= 0")

    @property
    def width(self) -> int:
        return (
            self.h
            + 2 * self.include_relative_coords
            + 7 * self.include_day_onehot
            + 2 * self.include_slot_encoding
            + self.external_dims
        )


@dataclass
class RegionGraph:
    """One training/inference sample for a region at prediction slot t."""

    region_id: str
    node_features: np.ndarray          # [V, d]
    adjacency_norm: np.ndarray         # [V, V] symmetric, renormalized
    edge_weights_raw: dict             # {(u, v): weight} with u < v
    targets: np.ndarray                # [V] raw next-slot counts
    slot: int

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def binary_adjacency(self) -> np.ndarray:
        """0/1 adjacency with self-loops, the reconstruction target."""
        v = self.n_nodes
        a = np.eye(v)
        for (u, w) in self.edge_weights_raw:
            a[u, w] = 1.0
            a[w, u] = 1.0
        return a


def build_adjacency(grid: HexGrid, region) -> dict:
    """Raw edge weights: 1 + inter-cell trip volume between adjacent cells.

    Every pair of axially adjacent cells gets an edge; the unit base weight
    means a region with no recorded trips falls back to pure adjacency.
    Volume counts trips in either direction, so the map is symmetric by
    construction.  Keys are (u, v) with u < v.
    """
    weights: dict[tuple[int, int], float] = {}
    for i in range(grid.n_cells):
        q, r = (int(x) for x in grid.axial[i])
        for dq, dr in AXIAL_NEIGHBOR_OFFSETS:
            j = grid.cell_at_axial(q + dq, r + dr)
            if j is not None and i < j:
                weights[(i, j)] = 1.0

    for trip in region.trips:
        if trip.dropoff_lat is None or trip.dropoff_lon is None:
            continue
        try:
            u = locate_cell(grid, trip.pickup_lat, trip.pickup_lon)
            v = locate_cell(grid, trip.dropoff_lat, trip.dropoff_lon)
        except OutOfGridError:
            continue
        key = (min(u, v), max(u, v))
        if key in weights:
            weights[key] += 1.0
    return weights


def normalize_adjacency(edge_weights_raw: dict, n_nodes: int) -> np.ndarray:
    """Renormalized adjacency D^{-1/2} (A + I) D^{-1/2} as a dense matrix."""
    a = np.zeros((n_nodes, n_nodes))
    for (u, v), w in edge_weights_raw.items():
        if w < 0:
            raise ContractViolationError(f"negative edge weight {w} on ({u}, {v})")
        if u == v:
            raise ContractViolationError(f"self-loop ({u}, {v}) in raw edge weights")
        if a[v, u] != 0.0 and not math.isclose(a[v, u], w, rel_tol=0, abs_tol=0):
            raise ContractViolationError(f"asymmetric weights on pair ({u}, {v})")
        a[u, v] = w
        a[v, u] = w
    a_tilde = a + np.eye(n_nodes)
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    # The outer product is exactly symmetric (float multiplication commutes),
    # so the result is bitwise symmetric, not just approximately.
    return a_tilde * (d_inv_sqrt[:, None] * d_inv_sqrt[None, :])


def _local_slot_start(demand: DemandTensor, t: int):
    start = demand.epoch + timedelta(minutes=t * demand.interval_min)
    return start.astimezone(ZoneInfo(demand.tz))


def node_features(
    demand: DemandTensor,
    grid: HexGrid,
    t: int,
    spec: FeatureSpec,
    external: np.ndarray | None = None,
    demand_scale: float | None = None,
) -> np.ndarray:
    """Assemble the [V, width] feature matrix for prediction slot t.

    Columns: h demand lags (oldest first, scaled by the region's training-set
    max), relative (lat, lon) within the region bbox, day-of-week one-hot
    (Monday = index 0), (sin, cos) time-of-day encoding, then any external
    features.  Day and time-of-day use the region's local timezone.
    """
    if t < spec.h - 1:
        raise InsufficientHistoryError(
            f"slot {t} has only {t + 1} history slots, need h={spec.h}"
        )
    if t >= demand.n_slots:
        raise NoTargetError(f"slot {t} outside tensor with {demand.n_slots} slots")

    v = grid.n_cells
    blocks = []

    scale = demand_scale if demand_scale is not None else float(demand.values.max())
    if scale <= 0:
        scale = 1.0
    lags = demand.values[:, t - spec.h + 1 : t + 1].astype(float) / scale
    blocks.append(lags)

    if spec.include_relative_coords:
        lats = np.array([lat for lat, _ in grid.bbox])
        lons = np.array([lon for _, lon in grid.bbox])
        span_lat = max(lats.max() - lats.min(), 1e-12)
        span_lon = max(lons.max() - lons.min(), 1e-12)
        rel_lat = (grid.centroids_latlon[:, 0] - lats.min()) / span_lat
        rel_lon = (grid.centroids_latlon[:, 1] - lons.min()) / span_lon
        blocks.append(np.clip(np.stack([rel_lat, rel_lon], axis=1), 0.0, 1.0))

    local = _local_slot_start(demand, t)
    if spec.include_day_onehot:
        onehot = np.zeros((v, 7))
        onehot[:, local.weekday()] = 1.0
        blocks.append(onehot)

    if spec.include_slot_encoding:
        minutes = local.hour * 60 + local.minute + local.second / 60.0
        angle = 2.0 * math.pi * minutes / 1440.0
        enc = np.tile([math.sin(angle), math.cos(angle)], (v, 1))
        blocks.append(enc)

    if spec.external_dims:
        if external is None or external.shape != (v, spec.external_dims):
            raise ContractViolationError(
                f"external features must be [{v}, {spec.external_dims}]"
            )
        blocks.append(external.astype(float))

    x = np.concatenate(blocks, axis=1)
    if x.shape[1] != spec.width:
        raise ContractViolationError(
            f"feature width {x.shape[1]} != spec width {spec.width}"
        )
    if not np.isfinite(x).all():
        raise ContractViolationError("non-finite node features")
    return x


def build_snapshot(
    demand: DemandTensor,
    grid: HexGrid,
    region,
    t: int,
    spec: FeatureSpec,
    edge_weights: dict | None = None,
    external: np.ndarray | None = None,
    demand_scale: float | None = None,
) -> RegionGraph:
    """RegionGraph at slot t: features from the history window, target y_{t+1}.

    Pass precomputed edge_weights to avoid re-scanning trips for every t;
    topology is fixed per region.
    """
    if t + 1 >= demand.n_slots:
        raise NoTargetError(f"slot {t}+1 has no target in tensor of {demand.n_slots} slots")
    x = node_features(demand, grid, t, spec, external=external, demand_scale=demand_scale)
    weights = edge_weights if edge_weights is not None else build_adjacency(grid, region)
    adj = normalize_adjacency(weights, grid.n_cells)
    return RegionGraph(
        region_id=demand.region_id,
        node_features=x,
        adjacency_norm=adj,
        edge_weights_raw=weights,
        targets=demand.values[:, t + 1].astype(float),
        slot=t,
    )


def build_inference_snapshot(
    demand: DemandTensor,
    grid: HexGrid,
    region,
    spec: FeatureSpec,
    t: int | None = None,
    external: np.ndarray | None = None,
) -> RegionGraph:
    """Snapshot for forecasting past the observed window: no target required.

    Defaults to the last observed slot, predicting the slot after the tensor
    ends; targets are zero placeholders and must not be scored.
    """
    if t is None:
        t = demand.n_slots - 1
    x = node_features(demand, grid, t, spec, external=external)
    weights = build_adjacency(grid, region)
    adj = normalize_adjacency(weights, grid.n_cells)
    return RegionGraph(
        region_id=demand.region_id,
        node_features=x,
        adjacency_norm=adj,
        edge_weights_raw=weights,
        targets=np.zeros(grid.n_cells),
        slot=t,
    )


def snapshot_range(demand: DemandTensor, spec: FeatureSpec) -> range:
    """Valid prediction slots: full history behind t and a target at t+1."""
    return range(spec.h - 1, demand.n_slots - 1)


def build_region_snapshots(
    demand: DemandTensor,
    grid: HexGrid,
    region,
    spec: FeatureSpec,
    external: np.ndarray | None = None,
) -> list[RegionGraph]:
    """All valid snapshots of a region, sharing one adjacency and demand scale."""
    weights = build_adjacency(grid, region)
    adj = normalize_adjacency(weights, grid.n_cells)
    scale = float(demand.values.max())
    out = []
    for t in snapshot_range(demand, spec):
        x = node_features(demand, grid, t, spec, external=external, demand_scale=scale)
        out.append(
            RegionGraph(
                region_id=demand.region_id,
                node_features=x,
                adjacency_norm=adj,
                edge_weights_raw=weights,
                targets=demand.values[:, t + 1].astype(float),
                slot=t,
            )
        )
    return out


def save_snapshots(path: str | Path, graphs: list[RegionGraph], spec: FeatureSpec) -> None:
    """Pack snapshots into one .npz; grouped per region, bit-exact round trip."""
    by_region: dict[str, list[RegionGraph]] = {}
    for g in graphs:
        by_region.setdefault(g.region_id, []).append(g)

    arrays: dict[str, np.ndarray] = {}
    manifest = {"version": SNAPSHOT_FORMAT_VERSION, "feature_spec": asdict(spec), "regions": []}
    for idx, (region_id, group) in enumerate(sorted(by_region.items())):
        manifest["regions"].append(
            {"region_id": region_id, "key": idx, "n_snapshots": len(group)}
        )
        arrays[f"feat_{idx}"] = np.stack([g.node_features for g in group])
        arrays[f"targ_{idx}"] = np.stack([g.targets for g in group])
        arrays[f"slot_{idx}"] = np.array([g.slot for g in group], dtype=np.int64)
        arrays[f"adj_{idx}"] = group[0].adjacency_norm
        edges = sorted(group[0].edge_weights_raw.items())
        arrays[f"edges_{idx}"] = np.array(
            [[u, v, w] for (u, v), w in edges], dtype=float
        ).reshape(-1, 3)
    arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_snapshots(path: str | Path) -> tuple[list[RegionGraph], FeatureSpec]:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["manifest"]).decode())
        if manifest["version"] != SNAPSHOT_FORMAT_VERSION:
            raise ContractViolationError(
                f"snapshot format version {manifest['version']} unsupported"
            )
        spec = FeatureSpec(**manifest["feature_spec"])
        graphs: list[RegionGraph] = []
        for entry in manifest["regions"]:
            idx = entry["key"]
            feats = data[f"feat_{idx}"]
            targs = data[f"targ_{idx}"]
            slots = data[f"slot_{idx}"]
            adj = data[f"adj_{idx}"]
            weights = {
                (int(u), int(v)): float(w) for u, v, w in data[f"edges_{idx}"]
            }
            for i in range(entry["n_snapshots"]):
                graphs.append(
                    RegionGraph(
                        region_id=entry["region_id"],
                        node_features=feats[i],
                        adjacency_norm=adj,
                        edge_weights_raw=weights,
                        targets=targs[i],
                        slot=int(slots[i]),
                    )
                )
    return graphs, spec
