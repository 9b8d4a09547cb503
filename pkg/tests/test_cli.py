import gzip
import json
from pathlib import Path

import numpy as np
import pytest

from demandcast.cli import main
from demandcast.hexgrid import load_demand

DATA = Path(__file__).parent / "data"

TINY_CONFIG = """\
experiment:
  max_epochs: 2
  batch_size: 16
  seed: 5
  hidden1: 8
  hidden2: 8
  latent_dim: 4
  head_hidden: 8
synth:
  n_regions: 3
  grid_diameter_cells: 4
  days: 2
  seed: 5
acceptance:
  min_margin_over_gcn: -1.0
  must_beat_all_baselines: false
  probe_specific_min: 0.0
  probe_agnostic_max_above_chance: 1.0
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture()
def manhattan_polygon(tmp_path):
    path = tmp_path / "manhattan.json"
    path.write_text(json.dumps([
        [40.68, -74.05], [40.68, -73.90], [40.85, -73.90], [40.85, -74.05]
    ]))
    return path


class TestIngestCommand:
    def test_nyc_sample_to_canonical(self, tmp_path, manhattan_polygon):
        out = tmp_path / "canon.csv"
        code = main([
            "ingest", "--dialect", "nyc_yellow",
            "--input", str(DATA / "nyc_yellow_sample_10k.csv.gz"),
            "--region-polygon", str(manhattan_polygon),
            "--region-id", "nyc", "--tz", "America/New_York",
            "--out", str(out),
        ])
        assert code == 0
        assert out.exists()
        report = json.loads(Path(str(out) + ".report.json").read_text())
        assert report["parsed"] + report["skipped_malformed"] == 10_000
        assert report["retained"] + report["dropped_outside"] == report["parsed"]
        assert report["retained"] > 9000

    def test_unknown_dialect_exit_code(self, tmp_path, manhattan_polygon):
        code = main([
            "ingest", "--dialect", "canonical_csv",
            "--input", str(tmp_path / "nope.csv"),
            "--region-polygon", str(manhattan_polygon),
            "--out", str(tmp_path / "x.csv"),
        ])
        assert code == 2  # missing input file -> data error

    def test_usage_error_exit_code(self):
        assert main(["ingest", "--dialect", "nonsense"]) == 1


class TestGridCommand:
    def test_grid_from_canonical(self, tmp_path, manhattan_polygon):
        canon = tmp_path / "canon.csv"
        main([
            "ingest", "--dialect", "nyc_yellow",
            "--input", str(DATA / "nyc_yellow_sample_10k.csv.gz"),
            "--region-polygon", str(manhattan_polygon),
            "--tz", "America/New_York", "--out", str(canon),
        ])
        out = tmp_path / "tensor"
        code = main([
            "grid", "--trips", str(canon), "--region-polygon", str(manhattan_polygon),
            "--tz", "America/New_York", "--edge-km", "1.4", "--interval-min", "30",
            "--out", str(out),
        ])
        assert code == 0
        tensor = load_demand(out)
        assert tensor.values.sum() > 9000
        assert tensor.interval_min == 30


class TestSynthCommand:
    def test_synth_outputs(self, tmp_path, tiny_config):
        out = tmp_path / "synthdata"
        code = main(["synth", "--config", str(tiny_config), "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["regions"]) == 3
        for entry in manifest["regions"]:
            rid = entry["region_id"]
            assert (out / f"{rid}.trips.csv").exists()
            assert (out / f"{rid}.polygon.json").exists()
            rates = np.load(out / f"{rid}.rates.npz")["rates"]
            assert rates.shape[0] == entry["n_cells"]


class TestTrainEvaluatePredict:
    @pytest.fixture()
    def checkpoint(self, tmp_path, tiny_config):
        ckpt = tmp_path / "model.ckpt"
        code = main(["train", "--config", str(tiny_config), "--hold-out", "R2",
                     "--out", str(ckpt)])
        assert code == 0
        return ckpt

    def test_train_writes_checkpoint_and_history(self, checkpoint):
        assert checkpoint.exists()
        history = Path(str(checkpoint) + ".history.jsonl")
        lines = history.read_text().splitlines()
        assert len(lines) == 2

    def test_evaluate_on_held_out(self, tmp_path, tiny_config, checkpoint):
        out = tmp_path / "evalout"
        code = main(["evaluate", "--config", str(tiny_config), "--ckpt", str(checkpoint),
                     "--region", "R2", "--baselines", "gcn_direct", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        methods = {entry["method"] for entry in doc["reports"]}
        assert methods == {"proposed", "gcn_direct"}

    def test_predict_row_count_and_consistency(self, tmp_path, tiny_config, checkpoint):
        synth_dir = tmp_path / "synthdata"
        main(["synth", "--config", str(tiny_config), "--out", str(synth_dir)])
        out = tmp_path / "pred.csv"
        code = main([
            "predict", "--ckpt", str(checkpoint),
            "--trips", str(synth_dir / "R2.trips.csv"),
            "--region-polygon", str(synth_dir / "R2.polygon.json"),
            "--region-id", "R2", "--out", str(out),
        ])
        assert code == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "cell_id,lat,lon,predicted_demand"

        # cross-path consistency: the library evaluation path must produce
        # bit-identical predictions for the same final snapshot
        from demandcast.config import load_run_config
        from demandcast.evaluation import predict_graph
        from demandcast.pipeline import build_all_snapshots, load_experiment_data
        from demandcast.training import load_checkpoint

        cfg = load_run_config(tiny_config)
        data = load_experiment_data(cfg)
        snaps = build_all_snapshots(cfg, data)["R2"]
        model, _, _ = load_checkpoint(checkpoint)
        expected = predict_graph(model, snaps[-1])
        got = np.array([float(r.split(",")[3]) for r in rows[1:]])
        assert np.array_equal(got, expected)

    def test_predict_insufficient_history(self, tmp_path, checkpoint):
        trips = tmp_path / "short.csv"
        trips.write_text(
            "pickup_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,dropoff_time\n"
            "2024-01-01T00:10:00Z,40.001,-100.001,,,\n"
        )
        polygon = tmp_path / "poly.json"
        polygon.write_text(json.dumps([[39.95, -100.05], [39.95, -99.95],
                                       [40.05, -99.95], [40.05, -100.05]]))
        code = main(["predict", "--ckpt", str(checkpoint), "--trips", str(trips),
                     "--region-polygon", str(polygon), "--out", str(tmp_path / "p.csv")])
        assert code == 2


class TestE2ECommand:
    def test_dry_run_prints_plan(self, tiny_config, tmp_path, capsys):
        code = main(["e2e", "--config", str(tiny_config), "--out", str(tmp_path / "o"),
                     "--dry-run"])
        assert code == 0
        captured = capsys.readouterr().out
        for stage in ("data", "train", "evaluate", "report"):
            assert stage in captured

    def test_missing_config_path_is_config_error(self, tmp_path):
        code = main(["e2e", "--config", str(tmp_path / "absent.yaml"),
                     "--out", str(tmp_path / "o")])
        assert code == 2  # unreadable file -> I/O

    def test_tiny_e2e_runs_and_reports(self, tiny_config, tmp_path):
        out = tmp_path / "e2e"
        code = main(["e2e", "--config", str(tiny_config), "--out", str(out),
                     "--baselines", "gcn_direct"])
        assert code == 0  # thresholds disabled in the tiny config
        doc = json.loads((out / "report.json").read_text())
        assert {e["method"] for e in doc["reports"]} == {"proposed", "gcn_direct"}
        assert (out / "probes.json").exists()
        assert (out / "accuracy_by_method.png").exists()
        assert (out / "history.jsonl").exists()
        assert (out / "model.ckpt").exists()
