"""Cross-region taxi demand forecasting on hexagonal grids.

Trains one model on several cities and predicts next-slot demand in a city
it has never seen, by disentangling region-specific from region-independent
graph latents.
"""

from .errors import DemandcastError
from .graphs import FeatureSpec, RegionGraph, build_snapshot, normalize_adjacency
from .hexgrid import DemandTensor, HexGrid, SlotIndex, bin_time, build_hex_grid, count_demand, locate_cell
from .model import DisentangledModel, ModelConfig
from .synth import SynthConfig, generate_region, oracle_expected_demand
from .training import ExperimentConfig, SplitPlan, load_checkpoint, make_loco_splits, probe_region_leakage, save_checkpoint, train
from .evaluation import MetricsReport, accuracy_one_off, evaluate_unseen, run_baseline
from .trips import RegionDataset, TripRecord, clip_to_region, parse_trip_records

__version__ = "0.1.0"

__all__ = [
    "DemandcastError",
    "FeatureSpec",
    "RegionGraph",
    "build_snapshot",
    "normalize_adjacency",
    "DemandTensor",
    "HexGrid",
    "SlotIndex",
    "bin_time",
    "build_hex_grid",
    "count_demand",
    "locate_cell",
    "DisentangledModel",
    "ModelConfig",
    "SynthConfig",
    "generate_region",
    "oracle_expected_demand",
    "ExperimentConfig",
    "SplitPlan",
    "load_checkpoint",
    "make_loco_splits",
    "probe_region_leakage",
    "save_checkpoint",
    "train",
    "MetricsReport",
    "accuracy_one_off",
    "evaluate_unseen",
    "run_baseline",
    "RegionDataset",
    "TripRecord",
    "clip_to_region",
    "parse_trip_records",
    "__version__",
]
