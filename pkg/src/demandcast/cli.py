"""Command-line entry point.

Subcommands: ingest, grid, synth, train, evaluate, predict, e2e.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure, 4 acceptance thresholds not met (e2e only).
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from . import pipeline
from .config import RunConfig, load_run_config
from .errors import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_THRESHOLDS,
    ConfigurationError,
    DemandcastError,
    InsufficientHistoryError,
    exit_code_for,
)
from .evaluation import BASELINES, render_report, run_baseline, evaluate_unseen, predict_graph
from .graphs import build_inference_snapshot
from .hexgrid import build_hex_grid, count_demand, save_demand
from .synth import generate_region, rate_matrix, region_grid
from .trips import (
    DIALECTS,
    IngestReport,
    clip_to_region,
    load_polygon,
    parse_trip_records,
    write_canonical,
)
from .training import load_checkpoint, make_loco_splits, save_checkpoint, train


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration YAML")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", required=True, help="output path or directory")


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = load_run_config(args.config)
    else:
        from .config import default_run_config

        cfg = default_run_config()
    if getattr(args, "seed", None) is not None:
        cfg.experiment.seed = args.seed
        if cfg.synth is not None:
            cfg.synth.seed = args.seed
    return cfg


def cmd_ingest(args) -> int:
    polygon = load_polygon(args.region_polygon)
    report = IngestReport()
    trips = parse_trip_records(args.input, args.dialect, report=report)
    region = clip_to_region(trips, polygon, region_id=args.region_id, tz=args.tz,
                            report=report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_canonical(region.trips, out)
    Path(str(out) + ".report.json").write_text(report.to_json())
    print(f"ingest: {report.retained} retained, {report.dropped_outside} outside, "
          f"{report.skipped_malformed} malformed -> {out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    edge_km = args.edge_km
    interval_min = args.interval_min
    polygon = load_polygon(args.region_polygon)
    trips = list(parse_trip_records(args.trips, "canonical_csv"))
    region = clip_to_region(trips, polygon, region_id=args.region_id, tz=args.tz)
    grid = build_hex_grid(polygon, edge_km)
    if args.epoch:
        epoch = datetime.fromisoformat(args.epoch.replace("Z", "+00:00"))
        if epoch.tzinfo is None:
            epoch = epoch.replace(tzinfo=timezone.utc)
    else:
        first_local = min(t.pickup_time for t in region.trips).astimezone(ZoneInfo(args.tz))
        epoch = first_local.replace(hour=0, minute=0, second=0, microsecond=0)
    epoch = epoch.astimezone(timezone.utc)
    span = max(t.pickup_time for t in region.trips) - epoch
    n_slots = args.slots or int(span.total_seconds() // (interval_min * 60)) + 1
    tensor, report = count_demand(region, grid, interval_min, epoch, n_slots)
    save_demand(tensor, args.out)
    print(f"grid: {grid.n_cells} cells x {n_slots} slots, "
          f"{report['counted']} pickups counted -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if cfg.synth is None:
        raise ConfigurationError("config has no synth section")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"regions": [], "interval_min": cfg.synth.interval_min,
                "n_slots": cfg.synth.n_slots, "seed": cfg.synth.seed}
    for i in range(cfg.synth.n_regions):
        region = generate_region(cfg.synth, i)
        grid = region_grid(cfg.synth, i)
        rid = region.region_id
        write_canonical(region.trips, out / f"{rid}.trips.csv")
        (out / f"{rid}.polygon.json").write_text(
            json.dumps([[lat, lon] for lat, lon in region.bounding_polygon])
        )
        np.savez_compressed(out / f"{rid}.rates.npz", rates=rate_matrix(cfg.synth, i, grid))
        manifest["regions"].append({"region_id": rid, "n_trips": len(region.trips),
                                    "n_cells": grid.n_cells})
        print(f"synth: {rid} -> {len(region.trips)} trips over {grid.n_cells} cells")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = pipeline.load_experiment_data(cfg)
    region_ids = sorted(data)
    held_out = args.hold_out or pipeline.pick_held_out(cfg, region_ids)
    if held_out not in region_ids:
        raise ConfigurationError(f"--hold-out {held_out!r} not among {region_ids}")
    make_loco_splits(region_ids)  # validates region count
    snapshots = pipeline.build_all_snapshots(cfg, data)
    train_sets = {rid: g for rid, g in snapshots.items() if rid != held_out}
    cfg.experiment.held_out_region = held_out

    def log(record):
        if isinstance(record, dict):
            print(f"epoch {record['epoch']:3d}  main {record.get('total', 0.0):.4f}  "
                  f"recon {record.get('recon_bce', 0.0):.4f}")
        else:
            print(record)

    model, history = train(cfg.experiment, train_sets, log_fn=log if args.verbose else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, cfg.experiment, cfg.features, out)
    history.to_jsonl(Path(str(out) + ".history.jsonl"))
    print(f"train: {len(train_sets)} regions, {history.steps} steps -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    data = pipeline.load_experiment_data(cfg)
    snapshots = pipeline.build_all_snapshots(cfg, data)
    region = args.region or pipeline.pick_held_out(cfg, sorted(data))
    if region not in snapshots:
        raise ConfigurationError(f"region {region!r} not in config data")
    model, exp, spec = load_checkpoint(args.ckpt)
    exp.held_out_region = region
    reports = [evaluate_unseen(model, snapshots[region], exp)]
    names = [b.strip() for b in args.baselines.split(",")] if args.baselines else []
    for name in names:
        reports.append(run_baseline(name, snapshots, exp))
    files = render_report(reports, args.out)
    for r in reports:
        print(f"evaluate: {r.method:>20s} region {r.region} "
              f"accuracy {r.accuracy:.3f} mae {r.mae:.3f}")
    print(f"evaluate: report -> {files['json']}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, exp, spec = load_checkpoint(args.ckpt)
    polygon = load_polygon(args.region_polygon)
    trips = list(parse_trip_records(args.trips, "canonical_csv"))
    region = clip_to_region(trips, polygon, region_id=args.region_id, tz=args.tz)
    if not region.trips:
        raise InsufficientHistoryError("no trips inside the region polygon")
    grid = build_hex_grid(polygon, exp.edge_km)
    first_local = min(t.pickup_time for t in region.trips).astimezone(ZoneInfo(args.tz))
    epoch = first_local.replace(hour=0, minute=0, second=0, microsecond=0)
    epoch = epoch.astimezone(timezone.utc)
    span = max(t.pickup_time for t in region.trips) - epoch
    n_slots = int(span.total_seconds() // (exp.interval_min * 60)) + 1
    if n_slots < spec.h:
        raise InsufficientHistoryError(
            f"history covers {n_slots} slots, need at least h={spec.h}"
        )
    tensor, _ = count_demand(region, grid, exp.interval_min, epoch, n_slots)
    snapshot = build_inference_snapshot(tensor, grid, region, spec)
    y_hat = predict_graph(model, snapshot)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("cell_id,lat,lon,predicted_demand\n")
        for cell in range(grid.n_cells):
            lat, lon = grid.centroids_latlon[cell]
            fh.write(f"{cell},{lat!r},{lon!r},{y_hat[cell]!r}\n")
    print(f"predict: {grid.n_cells} cells, next slot after t={n_slots - 1} -> {out}")
    return EXIT_OK


def cmd_e2e(args) -> int:
    cfg = _load_config(args)
    baselines = tuple(b.strip() for b in args.baselines.split(",")) if args.baselines else BASELINES
    if args.dry_run:
        data_kind = "synth" if cfg.synth is not None else "ingest"
        print("e2e plan:")
        for stage in pipeline.E2E_STAGES:
            detail = f" ({data_kind})" if stage == "data" else ""
            print(f"  - {stage}{detail}")
        return EXIT_OK
    result = pipeline.run_e2e(cfg, args.out, baselines=baselines,
                              log_fn=print if args.verbose else None)
    for r in result.reports:
        print(f"e2e: {r.method:>20s} accuracy {r.accuracy:.3f} mae {r.mae:.3f}")
    print(f"e2e: probe agnostic {result.probe_agnostic:.3f}, "
          f"specific {result.probe_specific:.3f}")
    if not result.thresholds_met:
        for failure in result.failures:
            print(f"e2e: threshold failed: {failure}", file=sys.stderr)
        return EXIT_THRESHOLDS
    print("e2e: all acceptance thresholds met")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demandcast",
        description="Cross-region taxi demand forecasting on hexagonal grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a raw trip file into canonical CSV")
    p.add_argument("--dialect", required=True, choices=DIALECTS)
    p.add_argument("--input", required=True)
    p.add_argument("--region-polygon", required=True)
    p.add_argument("--region-id", default="region")
    p.add_argument("--tz", default="UTC")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("grid", help="aggregate canonical trips into a demand tensor")
    p.add_argument("--trips", required=True, help="canonical CSV")
    p.add_argument("--region-polygon", required=True)
    p.add_argument("--region-id", default="region")
    p.add_argument("--tz", default="UTC")
    p.add_argument("--edge-km", type=float, default=1.4)
    p.add_argument("--interval-min", type=int, default=30)
    p.add_argument("--epoch", help="ISO UTC slot-0 start; default: first trip's local midnight")
    p.add_argument("--slots", type=int, help="number of slots; default: cover all trips")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("synth", help="generate synthetic multi-region trip data")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with one region held out")
    _add_common(p)
    p.add_argument("--hold-out", help="region id to exclude from training")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a held-out region")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--region", help="held-out region id (default from config)")
    p.add_argument("--baselines", default="",
                   help=f"comma-separated subset of {','.join(BASELINES)}")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="forecast next-slot demand for a region")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trips", required=True, help="canonical CSV history (>= h slots)")
    p.add_argument("--region-polygon", required=True)
    p.add_argument("--region-id", default="region")
    p.add_argument("--tz", default="UTC")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("e2e", help="synth -> train -> evaluate -> report, one config")
    _add_common(p)
    p.add_argument("--baselines", default="")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_e2e)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; our convention is 1.
        return EXIT_OK if not exc.code else EXIT_CONFIG
    try:
        return args.func(args)
    except (DemandcastError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
