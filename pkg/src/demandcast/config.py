"""Run configuration: one YAML document driving every pipeline stage.

Unknown keys anywhere in the document are hard errors (typo protection);
relative paths resolve against the config file location.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .graphs import FeatureSpec
from .synth import RegionStyle, SynthConfig
from .training import ExperimentConfig


@dataclass
class RegionSource:
    region_id: str
    trips: str
    polygon: str
    dialect: str = "canonical_csv"
    tz: str = "UTC"


@dataclass
class AcceptanceThresholds:
    """Pass/fail gates applied by the e2e command's exit code."""

    min_margin_over_gcn: float = 0.05
    must_beat_all_baselines: bool = True
    probe_specific_min: float = 0.80
    probe_agnostic_max_above_chance: float = 0.15


@dataclass
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    synth: SynthConfig | None = None
    regions: list[RegionSource] = field(default_factory=list)
    acceptance: AcceptanceThresholds = field(default_factory=AcceptanceThresholds)
    base_dir: Path = field(default_factory=Path)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _build(cls, doc: dict, context: str):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{context}: expected a mapping, got {type(doc).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(
            f"{context}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}"
        )
    return cls(**doc)


def _build_synth(doc: dict) -> SynthConfig:
    doc = dict(doc)
    styles = doc.pop("region_styles", None)
    allowed = {f.name for f in fields(SynthConfig)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(f"synth: unknown key(s) {sorted(unknown)}")
    if "shared_daily_profile" in doc:
        doc["shared_daily_profile"] = tuple(doc["shared_daily_profile"])
    cfg_kwargs = dict(doc)
    if styles is not None:
        built = []
        for i, s in enumerate(styles):
            s = dict(s)
            centers = s.pop("hotspot_centers", None)
            if centers is None:
                raise ConfigurationError(f"synth.region_styles[{i}]: hotspot_centers required")
            style = _build(RegionStyle, {"hotspot_centers": tuple(tuple(c) for c in centers), **s},
                           f"synth.region_styles[{i}]")
            built.append(style)
        cfg_kwargs["region_styles"] = tuple(built)
    return SynthConfig(**cfg_kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")

    allowed = {"experiment", "features", "synth", "regions", "acceptance"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(f"{path}: unknown section(s) {sorted(unknown)}")

    cfg = RunConfig(base_dir=path.parent.resolve())
    if "experiment" in doc:
        cfg.experiment = _build(ExperimentConfig, doc["experiment"], "experiment")
    if "features" in doc:
        cfg.features = _build(FeatureSpec, doc["features"], "features")
    if "synth" in doc:
        cfg.synth = _build_synth(doc["synth"])
    if "regions" in doc:
        if not isinstance(doc["regions"], list):
            raise ConfigurationError("regions: expected a list")
        cfg.regions = [
            _build(RegionSource, entry, f"regions[{i}]")
            for i, entry in enumerate(doc["regions"])
        ]
    if "acceptance" in doc:
        cfg.acceptance = _build(AcceptanceThresholds, doc["acceptance"], "acceptance")

    # experiment.history and features.h describe the same window; keep them
    # coherent, letting whichever was written in the file win.
    h_explicit = isinstance(doc.get("features"), dict) and "h" in doc["features"]
    hist_explicit = isinstance(doc.get("experiment"), dict) and "history" in doc["experiment"]
    if h_explicit and hist_explicit and cfg.experiment.history != cfg.features.h:
        raise ConfigurationError(
            f"experiment.history={cfg.experiment.history} conflicts with features.h={cfg.features.h}"
        )
    if h_explicit and not hist_explicit:
        cfg.experiment.history = cfg.features.h
    elif cfg.experiment.history != cfg.features.h:
        cfg.features = FeatureSpec(
            h=cfg.experiment.history,
            include_day_onehot=cfg.features.include_day_onehot,
            include_slot_encoding=cfg.features.include_slot_encoding,
            include_relative_coords=cfg.features.include_relative_coords,
            external_dims=cfg.features.external_dims,
        )
    return cfg


def default_run_config() -> RunConfig:
    cfg = RunConfig()
    cfg.synth = SynthConfig()
    return cfg
