"""End-to-end experiment orchestration shared by the CLI and tests.

Stages: data (synthetic or ingested) -> grids/demand tensors -> snapshots ->
leave-one-city-out training -> unseen-region evaluation with baselines ->
report.  Primary outputs carry no timestamps, so a rerun with the same seed
is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig
from .errors import ConfigurationError
from .evaluation import (
    BASELINES,
    MetricsReport,
    evaluate_unseen,
    render_report,
    run_baseline,
)
from .graphs import RegionGraph, build_region_snapshots
from .hexgrid import DemandTensor, build_hex_grid, count_demand
from .synth import SYNTH_EPOCH, SynthConfig, generate_region, region_grid
from .trips import RegionDataset, clip_to_region, load_polygon, parse_trip_records
from .training import (
    ExperimentConfig,
    probe_region_leakage,
    save_checkpoint,
    train,
)

E2E_STAGES = ("data", "grid", "snapshots", "train", "evaluate", "report")


@dataclass
class E2EResult:
    reports: list[MetricsReport]
    probe_agnostic: float
    probe_specific: float
    thresholds_met: bool
    failures: list[str] = field(default_factory=list)
    out_files: dict = field(default_factory=dict)


def synth_region_data(
    synth: SynthConfig, region_index: int
) -> tuple[RegionDataset, DemandTensor]:
    """Generate one synthetic region and aggregate it into a demand tensor."""
    region = generate_region(synth, region_index)
    grid = region_grid(synth, region_index)
    tensor, _ = count_demand(region, grid, synth.interval_min, SYNTH_EPOCH, synth.n_slots)
    return region, tensor


def ingest_region_data(cfg: RunConfig, source) -> tuple[RegionDataset, DemandTensor]:
    """Parse, clip and grid one configured real-data region."""
    from datetime import timedelta, timezone
    from zoneinfo import ZoneInfo

    polygon = load_polygon(cfg.resolve(source.polygon))
    trips = parse_trip_records(cfg.resolve(source.trips), source.dialect)
    region = clip_to_region(trips, polygon, region_id=source.region_id, tz=source.tz)
    if not region.trips:
        raise ConfigurationError(f"region {source.region_id}: no trips inside polygon")
    grid = build_hex_grid(polygon, cfg.experiment.edge_km)
    first_local = min(t.pickup_time for t in region.trips).astimezone(ZoneInfo(source.tz))
    epoch = first_local.replace(hour=0, minute=0, second=0, microsecond=0)
    epoch = epoch.astimezone(timezone.utc)
    span = max(t.pickup_time for t in region.trips) - epoch
    n_slots = int(span.total_seconds() // (cfg.experiment.interval_min * 60)) + 1
    tensor, _ = count_demand(region, grid, cfg.experiment.interval_min, epoch, n_slots)
    return region, tensor


def build_all_snapshots(
    cfg: RunConfig,
    data: dict[str, tuple[RegionDataset, DemandTensor]],
) -> dict[str, list[RegionGraph]]:
    snapshots = {}
    for rid, (region, tensor) in data.items():
        snapshots[rid] = build_region_snapshots(tensor, tensor.grid, region, cfg.features)
    return snapshots


def load_experiment_data(cfg: RunConfig) -> dict[str, tuple[RegionDataset, DemandTensor]]:
    if cfg.synth is not None:
        return {
            cfg.synth.region_ids()[i]: synth_region_data(cfg.synth, i)
            for i in range(cfg.synth.n_regions)
        }
    if not cfg.regions:
        raise ConfigurationError("config must define either a synth section or regions")
    return {src.region_id: ingest_region_data(cfg, src) for src in cfg.regions}


def pick_held_out(cfg: RunConfig, region_ids: list[str]) -> str:
    held_out = cfg.experiment.held_out_region or region_ids[-1]
    if held_out not in region_ids:
        raise ConfigurationError(
            f"held-out region {held_out!r} not among regions {region_ids}"
        )
    return held_out


def run_e2e(
    cfg: RunConfig,
    out_dir: str | Path,
    baselines: tuple[str, ...] = BASELINES,
    log_fn=None,
) -> E2EResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def log(msg: str) -> None:
        if log_fn is not None:
            log_fn(msg)

    log("stage data: building region datasets")
    data = load_experiment_data(cfg)
    region_ids = sorted(data.keys())
    held_out = pick_held_out(cfg, region_ids)

    log("stage snapshots: assembling graph samples")
    snapshots = build_all_snapshots(cfg, data)
    train_sets = {rid: g for rid, g in snapshots.items() if rid != held_out}

    exp = cfg.experiment
    exp.held_out_region = held_out
    log(f"stage train: {len(region_ids) - 1} regions, hold out {held_out}")
    model, history = train(exp, train_sets, log_fn=log_fn)
    history.to_jsonl(out / "history.jsonl")
    save_checkpoint(model, exp, cfg.features, out / "model.ckpt")

    train_graphs = [g for graphs in train_sets.values() for g in graphs]
    probe_agn = probe_region_leakage(model, train_graphs, "agnostic")
    probe_spec = probe_region_leakage(model, train_graphs, "specific")
    log(f"probes: agnostic={probe_agn:.3f} specific={probe_spec:.3f}")

    log("stage evaluate: proposed model on held-out region")
    reports = [evaluate_unseen(model, snapshots[held_out], exp)]
    for name in baselines:
        log(f"stage evaluate: baseline {name}")
        reports.append(run_baseline(name, snapshots, exp))

    files = render_report(reports, out)
    probes_doc = {
        "probe_agnostic": probe_agn,
        "probe_specific": probe_spec,
        "chance": 1.0 / (len(region_ids) - 1),
    }
    (out / "probes.json").write_text(json.dumps(probes_doc, indent=2, sort_keys=True))
    files["probes"] = out / "probes.json"
    files["history"] = out / "history.jsonl"
    files["checkpoint"] = out / "model.ckpt"

    met, failures = check_thresholds(cfg, reports, probe_agn, probe_spec,
                                     n_train_regions=len(region_ids) - 1)
    return E2EResult(
        reports=reports,
        probe_agnostic=probe_agn,
        probe_specific=probe_spec,
        thresholds_met=met,
        failures=failures,
        out_files=files,
    )


def check_thresholds(
    cfg: RunConfig,
    reports: list[MetricsReport],
    probe_agn: float,
    probe_spec: float,
    n_train_regions: int,
) -> tuple[bool, list[str]]:
    acc = {r.method: r.accuracy for r in reports}
    proposed = acc.get("proposed")
    thr = cfg.acceptance
    failures = []
    if proposed is None:
        failures.append("no proposed-model report")
        return False, failures
    if "gcn_direct" in acc and proposed < acc["gcn_direct"] + thr.min_margin_over_gcn:
        failures.append(
            f"proposed {proposed:.3f} < gcn_direct {acc['gcn_direct']:.3f} "
            f"+ margin {thr.min_margin_over_gcn:.3f}"
        )
    if thr.must_beat_all_baselines:
        for name, value in acc.items():
            if name != "proposed" and proposed < value:
                failures.append(f"proposed {proposed:.3f} < {name} {value:.3f}")
    if probe_spec < thr.probe_specific_min:
        failures.append(f"probe(specific) {probe_spec:.3f} < {thr.probe_specific_min}")
    chance = 1.0 / n_train_regions
    if probe_agn > chance + thr.probe_agnostic_max_above_chance:
        failures.append(
            f"probe(agnostic) {probe_agn:.3f} > chance {chance:.3f} "
            f"+ {thr.probe_agnostic_max_above_chance}"
        )
    return not failures, failures
