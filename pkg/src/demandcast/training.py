"""Leave-one-city-out training orchestration.

Each optimization step runs a main phase (negative ELBO + task loss, all
parameters) followed by an adversarial phase (independent-excitation loss,
encoder parameters only).  Head parameters are asserted bitwise unchanged
across every adversarial step.  With a fixed seed the whole history is
reproducible on the same platform.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .errors import (
    CheckpointMismatchError,
    ConfigurationError,
    ContractViolationError,
    CorruptCheckpointError,
    NumericalFailureError,
)
from .graphs import FeatureSpec, RegionGraph
from .model import (
    DisentangledModel,
    ModelConfig,
    batched_phase_loss,
    graph_tensors,
)

CHECKPOINT_VERSION = 1


@dataclass
class ExperimentConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    latent_dim: int = 32
    hidden1: int = 64
    hidden2: int = 64
    head_hidden: int = 64
    edge_km: float = 1.4
    interval_min: int = 30
    history: int = 6
    lambda_elbo: float = 1.0
    lambda_ts: float = 1.0
    lambda_ie: float = 1.0
    adversarial_steps: int = 1
    seed: int = 7
    held_out_region: str | None = None
    probe_every: int = 0          # epochs between scheduled leakage probes; 0 = off
    patience: int = 0             # optional early stopping on main loss; 0 = off

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def model_config(self, in_dim: int, n_regions: int) -> ModelConfig:
        return ModelConfig(
            in_dim=in_dim,
            n_regions=n_regions,
            hidden1=self.hidden1,
            hidden2=self.hidden2,
            latent_dim=self.latent_dim,
            head_hidden=self.head_hidden,
            lambda_elbo=self.lambda_elbo,
            lambda_ts=self.lambda_ts,
            lambda_ie=self.lambda_ie,
        )


@dataclass
class SplitPlan:
    train_regions: tuple[str, ...]
    test_region: str
    sample_counts: dict = field(default_factory=dict)

    @property
    def n_train_regions(self) -> int:
        return len(self.train_regions)

    @property
    def total_samples(self) -> int:
        return sum(self.sample_counts.values())


def make_loco_splits(regions: list[str]) -> list[SplitPlan]:
    """One leave-one-city-out plan per region."""
    unique = list(dict.fromkeys(regions))
    if len(unique) < 3:
        raise ConfigurationError(
            f"leave-one-city-out needs >=3 regions (got {len(unique)}); "
            "the region classifier degenerates below 2 training classes"
        )
    return [
        SplitPlan(
            train_regions=tuple(r for r in unique if r != held_out),
            test_region=held_out,
        )
        for held_out in unique
    ]


@dataclass
class TrainingHistory:
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0

    def append_epoch(self, record: dict) -> None:
        self.epochs.append(record)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for record in self.epochs:
                fh.write(json.dumps(record) + "\n")

    def component(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs if key in e]


def _mean(values: list[float]) -> float:
    return float(sum(values) / len(values)) if values else 0.0


def train(
    config: ExperimentConfig,
    datasets: dict[str, list[RegionGraph]],
    log_fn=None,
) -> tuple[DisentangledModel, TrainingHistory]:
    """Train the disentangled model on the given regions (training split only).

    Returns the model plus a per-epoch history of all loss components.  Raises
    NumericalFailureError with the last good state attached if a loss goes
    non-finite.
    """
    vocab = tuple(sorted(datasets.keys()))
    if len(vocab) < 2:
        raise ConfigurationError("region classifier needs >=2 training regions")
    widths = {g.node_features.shape[1] for graphs in datasets.values() for g in graphs}
    if len(widths) != 1:
        raise ContractViolationError(f"inconsistent feature widths across regions: {widths}")
    in_dim = widths.pop()

    model = DisentangledModel(
        config.model_config(in_dim, len(vocab)), vocab, seed=config.seed
    )
    items = [graph_tensors(g) for rid in vocab for g in datasets[rid]]

    # Single-threaded matmuls are both faster on these small graphs and free
    # of any reduction-order variability.
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)

    history = TrainingHistory()
    try:
        _train_epochs(config, model, items, datasets, vocab, history, log_fn)
    finally:
        torch.set_num_threads(prev_threads)
    return model, history


def _train_epochs(config, model, items, datasets, vocab, history, log_fn) -> None:
    opt_main = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    opt_adv = torch.optim.Adam(model.encoder_parameters(), lr=config.learning_rate)
    shuffler = random.Random(config.seed)
    last_good = copy.deepcopy(model.state_dict())
    best_main = float("inf")
    stale = 0

    for epoch in range(config.max_epochs):
        order = list(range(len(items)))
        shuffler.shuffle(order)
        main_parts: dict[str, list[float]] = {}
        adv_parts: dict[str, list[float]] = {}

        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [items[i] for i in order[start : start + config.batch_size]]
            step_seed = (config.seed * 1_000_003 + epoch * 10_007 + batch_no) & 0x7FFFFFFF
            gen = torch.Generator().manual_seed(step_seed)

            try:
                opt_main.zero_grad(set_to_none=True)
                loss, parts = batched_phase_loss(model, batch, "main", gen)
                loss.backward()
                opt_main.step()
                for k, v in parts.items():
                    main_parts.setdefault(k, []).append(v)

                for _ in range(config.adversarial_steps):
                    heads_before = [p.detach().clone() for p in model.head_parameters()]
                    opt_main.zero_grad(set_to_none=True)
                    loss, parts = batched_phase_loss(model, batch, "adversarial", gen)
                    loss.backward()
                    opt_adv.step()
                    opt_main.zero_grad(set_to_none=True)
                    for k, v in parts.items():
                        adv_parts.setdefault(k, []).append(v)
                    for before, after in zip(heads_before, model.head_parameters()):
                        if not torch.equal(before, after):
                            raise ContractViolationError(
                                "adversarial step modified head parameters"
                            )
            except NumericalFailureError as exc:
                exc.diagnostics["epoch"] = epoch
                exc.diagnostics["last_good_state"] = last_good
                raise

            history.steps += 1

        record = {"epoch": epoch, "phase": "main"}
        record.update({k: _mean(v) for k, v in main_parts.items()})
        record.update({f"adv_{k}": _mean(v) for k, v in adv_parts.items()})
        record["heads_unchanged"] = True
        if config.probe_every and (epoch + 1) % config.probe_every == 0:
            all_graphs = [g for rid in vocab for g in datasets[rid]]
            record["probe_agnostic"] = probe_region_leakage(model, all_graphs, "agnostic")
            record["probe_specific"] = probe_region_leakage(model, all_graphs, "specific")
        history.append_epoch(record)
        if log_fn is not None:
            log_fn(record)
        last_good = copy.deepcopy(model.state_dict())

        if config.patience:
            if record["total"] < best_main - 1e-9:
                best_main = record["total"]
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break


def pooled_latents(
    model: DisentangledModel, graphs: list[RegionGraph], latent: str
) -> tuple[np.ndarray, np.ndarray]:
    """Graph-level mean-pooled posterior means plus region labels."""
    if latent not in ("agnostic", "specific"):
        raise ConfigurationError(f"latent must be 'agnostic' or 'specific', got {latent!r}")
    encoder = model.enc_agnostic if latent == "agnostic" else model.enc_specific
    feats, labels = [], []
    with torch.no_grad():
        for g in graphs:
            item = graph_tensors(g)
            sample = encoder(item["x"], item["adj_norm"], generator=None)
            feats.append(sample.mu.mean(dim=0).numpy())
            labels.append(model.region_index(g.region_id))
    return np.stack(feats), np.array(labels)


def linear_probe_accuracy(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> float:
    """Held-out accuracy of a linear softmax probe on an 80/20 split."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_test = max(1, int(round(test_fraction * len(labels))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    probe = LogisticRegression(max_iter=2000)
    probe.fit(features[train_idx], labels[train_idx])
    return float(probe.score(features[test_idx], labels[test_idx]))


def probe_region_leakage(
    model: DisentangledModel,
    graphs: list[RegionGraph],
    latent: str,
    seed: int = 0,
) -> float:
    """Linear decodability of region identity from one latent space.

    Low accuracy on the agnostic latent and high on the specific latent is
    the signature of successful disentanglement.
    """
    if len({g.region_id for g in graphs}) < 2:
        raise ConfigurationError("leakage probe needs graphs from >=2 regions")
    feats, labels = pooled_latents(model, graphs, latent)
    return linear_probe_accuracy(feats, labels, seed=seed)


def save_checkpoint(
    model: DisentangledModel,
    config: ExperimentConfig,
    feature_spec: FeatureSpec,
    path: str | Path,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "experiment_config": config.to_dict(),
        "feature_spec": asdict(feature_spec),
        "region_vocab": list(model.region_vocab),
        "seed": config.seed,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(
    path: str | Path,
    expected_regions: list[str] | None = None,
    expected_feature_dim: int | None = None,
) -> tuple[DisentangledModel, ExperimentConfig, FeatureSpec]:
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(
            f"unsupported checkpoint version {payload.get('version') if isinstance(payload, dict) else '?'}"
        )
    model_config = ModelConfig(**payload["model_config"])
    vocab = tuple(payload["region_vocab"])
    if expected_regions is not None and sorted(vocab) != sorted(expected_regions):
        raise CheckpointMismatchError(
            f"checkpoint trained on regions {sorted(vocab)}, expected {sorted(expected_regions)}"
        )
    if expected_feature_dim is not None and model_config.in_dim != expected_feature_dim:
        raise CheckpointMismatchError(
            f"checkpoint feature dim {model_config.in_dim} != data dim {expected_feature_dim}"
        )
    model = DisentangledModel(model_config, vocab, seed=payload["seed"])
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"state dict mismatch: {exc}") from exc
    config = ExperimentConfig(**payload["experiment_config"])
    spec = FeatureSpec(**payload["feature_spec"])
    return model, config, spec
