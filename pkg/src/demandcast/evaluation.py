"""Unseen-region evaluation: one-off accuracy, MAE, baselines, reporting.

A prediction counts as correct when its absolute error is strictly below
two trips; predictions are raw model outputs, never rounded.  Baselines are
deliberately simplified but preserve the mechanism they stand for: a plain
supervised GCN, unsupervised random-walk node embeddings feeding an MLP,
and a reconstruction-only variational graph autoencoder with a frozen-latent
regressor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import (
    CheckpointMismatchError,
    ConfigurationError,
    UndefinedMetricError,
)
from .graphs import RegionGraph
from .model import DTYPE, DisentangledModel, GCNEncoder, gcn_layer, graph_tensors, kl_diag_gaussian, _edge_bce, decode_adjacency_logits, _glorot
from .training import ExperimentConfig

ONE_OFF_THRESHOLD = 2.0

BASELINES = ("gcn_direct", "node_embedding_mlp", "graph_ae")


def accuracy_one_off(
    y_hat: np.ndarray, y: np.ndarray, threshold: float = ONE_OFF_THRESHOLD
) -> float:
    """Fraction of predictions with absolute error strictly less than two."""
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if y_hat.size == 0 or y.size == 0:
        raise UndefinedMetricError("accuracy over an empty prediction set is undefined")
    if y_hat.shape != y.shape:
        raise UndefinedMetricError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    return float(np.mean(np.abs(y_hat - y) < threshold))


@dataclass
class MetricsReport:
    method: str
    region: str
    accuracy: float
    mae: float
    n_predictions: int
    n_snapshots: int
    seed: int
    config_fingerprint: str
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(**doc)


def config_fingerprint(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _metrics(
    method: str,
    region: str,
    y_hat: np.ndarray,
    y: np.ndarray,
    n_snapshots: int,
    config: ExperimentConfig,
    notes: list[str],
) -> MetricsReport:
    return MetricsReport(
        method=method,
        region=region,
        accuracy=accuracy_one_off(y_hat, y),
        mae=float(np.mean(np.abs(y_hat - y))),
        n_predictions=int(y.size),
        n_snapshots=n_snapshots,
        seed=config.seed,
        config_fingerprint=config_fingerprint(config),
        warnings=notes,
    )


def predict_graph(model: DisentangledModel, graph: RegionGraph) -> np.ndarray:
    """Deterministic per-node forecast: z = mu from the agnostic encoder only."""
    item = graph_tensors(graph)
    with torch.no_grad():
        sample = model.enc_agnostic(item["x"], item["adj_norm"], generator=None)
        return model.regressor(sample.z).numpy()


def evaluate_unseen(
    model: DisentangledModel,
    test_graphs: list[RegionGraph],
    config: ExperimentConfig,
    method: str = "proposed",
) -> MetricsReport:
    """Score the demand head on a region absent from the training vocabulary."""
    if not test_graphs:
        raise UndefinedMetricError("no test graphs supplied")
    region = test_graphs[0].region_id
    notes: list[str] = []
    if region in model.region_vocab:
        notes.append(f"region-overlap: {region} was in the training vocabulary")
    width = test_graphs[0].node_features.shape[1]
    if width != model.config.in_dim:
        raise CheckpointMismatchError(
            f"feature dim {width} != checkpoint dim {model.config.in_dim}"
        )
    preds, actuals = [], []
    for g in test_graphs:
        preds.append(predict_graph(model, g))
        actuals.append(g.targets)
    return _metrics(
        method, region, np.concatenate(preds), np.concatenate(actuals),
        len(test_graphs), config, notes,
    )


# --- baselines ---------------------------------------------------------


class _GCNRegressor(nn.Module):
    """Plain 3-layer GCN with a softplus regression head; no latent tricks."""

    def __init__(self, in_dim: int, hidden1: int, hidden2: int, out_dim: int, head_hidden: int, seed: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(in_dim, hidden1, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(hidden1, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(hidden1, hidden2, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(hidden2, dtype=DTYPE))
        self.w3 = nn.Parameter(torch.empty(hidden2, out_dim, dtype=DTYPE))
        self.b3 = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))
        self.head1 = nn.Linear(out_dim, head_hidden, dtype=DTYPE)
        self.head2 = nn.Linear(head_hidden, 1, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        for w in (self.w1, self.w2, self.w3, self.head1.weight, self.head2.weight):
            _glorot(w, gen)
        with torch.no_grad():
            self.head1.bias.zero_()
            self.head2.bias.zero_()

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        h = gcn_layer(x, adj, self.w1, self.b1, "relu")
        h = gcn_layer(h, adj, self.w2, self.b2, "relu")
        h = gcn_layer(h, adj, self.w3, self.b3, "relu")
        h = torch.relu(self.head1(h))
        return torch.nn.functional.softplus(self.head2(h)).squeeze(-1)


class _MLPRegressor(nn.Module):
    def __init__(self, in_dim: int, hidden: int, seed: int):
        super().__init__()
        self.lin1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, 1, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        for lin in (self.lin1, self.lin2):
            _glorot(lin.weight, gen)
            with torch.no_grad():
                lin.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.softplus(self.lin2(torch.relu(self.lin1(x)))).squeeze(-1)


def _shuffled_batches(n_items: int, batch_size: int, epochs: int, seed: int):
    import random as _random

    shuffler = _random.Random(seed)
    for epoch in range(epochs):
        order = list(range(n_items))
        shuffler.shuffle(order)
        for start in range(0, n_items, batch_size):
            yield epoch, order[start : start + batch_size]


def _run_gcn_direct(
    train_items: list[dict], test_graphs: list[RegionGraph], config: ExperimentConfig
) -> np.ndarray:
    in_dim = train_items[0]["x"].shape[1]
    net = _GCNRegressor(
        in_dim, config.hidden1, config.hidden2, config.latent_dim,
        config.head_hidden, seed=config.seed,
    )
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    for _, idx in _shuffled_batches(len(train_items), config.batch_size, config.max_epochs, config.seed):
        opt.zero_grad(set_to_none=True)
        losses = [
            torch.mean(torch.abs(train_items[i]["y"] - net(train_items[i]["x"], train_items[i]["adj_norm"])))
            for i in idx
        ]
        torch.stack(losses).mean().backward()
        opt.step()
    preds = []
    with torch.no_grad():
        for g in test_graphs:
            item = graph_tensors(g)
            preds.append(net(item["x"], item["adj_norm"]).numpy())
    return np.concatenate(preds)


def _random_walk_embeddings(
    edge_weights: dict, n_nodes: int, dim: int, seed: int,
    n_walks: int = 10, walk_len: int = 20, window: int = 4, negatives: int = 5,
    epochs: int = 2, lr: float = 0.05,
) -> np.ndarray:
    """Skip-gram-with-negative-sampling embeddings over weighted random walks.

    Transductive and per-graph: embeddings from different regions live in
    unaligned bases, which is inherent to the mechanism.
    """
    rng = np.random.default_rng(seed)
    nbrs: list[list[int]] = [[] for _ in range(n_nodes)]
    probs: list[np.ndarray] = [np.array([]) for _ in range(n_nodes)]
    for node in range(n_nodes):
        weights = []
        for (u, v), w in edge_weights.items():
            if u == node:
                nbrs[node].append(v)
                weights.append(w)
            elif v == node:
                nbrs[node].append(u)
                weights.append(w)
        if weights:
            p = np.asarray(weights, dtype=float)
            probs[node] = p / p.sum()

    walks = []
    for _ in range(n_walks):
        for start in range(n_nodes):
            walk = [start]
            for _ in range(walk_len - 1):
                cur = walk[-1]
                if not nbrs[cur]:
                    break
                walk.append(int(rng.choice(nbrs[cur], p=probs[cur])))
            walks.append(walk)

    emb = rng.normal(scale=0.1, size=(n_nodes, dim))
    ctx = rng.normal(scale=0.1, size=(n_nodes, dim))
    for _ in range(epochs):
        for walk in walks:
            for i, center in enumerate(walk):
                lo = max(0, i - window)
                for j in range(lo, min(len(walk), i + window + 1)):
                    if i == j:
                        continue
                    pos = walk[j]
                    negs = rng.integers(0, n_nodes, size=negatives)
                    for target, label in [(pos, 1.0)] + [(int(n), 0.0) for n in negs]:
                        score = 1.0 / (1.0 + np.exp(-np.dot(emb[center], ctx[target])))
                        grad = (score - label)
                        g_emb = grad * ctx[target]
                        g_ctx = grad * emb[center]
                        emb[center] -= lr * g_emb
                        ctx[target] -= lr * g_ctx
    return emb


def _run_node_embedding_mlp(
    datasets: dict[str, list[RegionGraph]],
    train_regions: tuple[str, ...],
    test_region: str,
    config: ExperimentConfig,
) -> np.ndarray:
    emb_dim = config.latent_dim
    embeddings = {
        rid: _random_walk_embeddings(
            graphs[0].edge_weights_raw, graphs[0].n_nodes, emb_dim, seed=config.seed
        )
        for rid, graphs in datasets.items()
    }

    def features(graph: RegionGraph) -> torch.Tensor:
        stacked = np.concatenate([embeddings[graph.region_id], graph.node_features], axis=1)
        return torch.as_tensor(stacked, dtype=DTYPE)

    train_graphs = [g for rid in train_regions for g in datasets[rid]]
    in_dim = emb_dim + train_graphs[0].node_features.shape[1]
    net = _MLPRegressor(in_dim, config.head_hidden, seed=config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    feats = [features(g) for g in train_graphs]
    targs = [torch.as_tensor(g.targets, dtype=DTYPE) for g in train_graphs]
    for _, idx in _shuffled_batches(len(train_graphs), config.batch_size, config.max_epochs, config.seed):
        opt.zero_grad(set_to_none=True)
        losses = [torch.mean(torch.abs(targs[i] - net(feats[i]))) for i in idx]
        torch.stack(losses).mean().backward()
        opt.step()
    with torch.no_grad():
        return np.concatenate([net(features(g)).numpy() for g in datasets[test_region]])


def _run_graph_ae(
    datasets: dict[str, list[RegionGraph]],
    train_regions: tuple[str, ...],
    test_region: str,
    config: ExperimentConfig,
) -> np.ndarray:
    """Single VGAE trained on reconstruction + KL, then a frozen-latent MLP."""
    train_graphs = [g for rid in train_regions for g in datasets[rid]]
    items = [graph_tensors(g) for g in train_graphs]
    in_dim = items[0]["x"].shape[1]
    encoder = GCNEncoder(in_dim, config.hidden1, config.hidden2, config.latent_dim)
    gen0 = torch.Generator().manual_seed(config.seed)
    encoder.reset_parameters(gen0)
    opt = torch.optim.Adam(encoder.parameters(), lr=config.learning_rate)
    for step, (epoch, idx) in enumerate(
        _shuffled_batches(len(items), config.batch_size, config.max_epochs, config.seed)
    ):
        gen = torch.Generator().manual_seed((config.seed * 7919 + step) & 0x7FFFFFFF)
        opt.zero_grad(set_to_none=True)
        losses = []
        for i in idx:
            sample = encoder(items[i]["x"], items[i]["adj_norm"], gen)
            logits = sample.z @ sample.z.transpose(-1, -2)
            losses.append(
                _edge_bce(logits, items[i]["adj_bin"])
                + kl_diag_gaussian(sample.mu, sample.logvar)
            )
        torch.stack(losses).mean().backward()
        opt.step()

    def latents(graph: RegionGraph) -> torch.Tensor:
        item = graph_tensors(graph)
        with torch.no_grad():
            return encoder(item["x"], item["adj_norm"], generator=None).mu

    net = _MLPRegressor(config.latent_dim, config.head_hidden, seed=config.seed + 1)
    opt2 = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    zs = [latents(g) for g in train_graphs]
    targs = [torch.as_tensor(g.targets, dtype=DTYPE) for g in train_graphs]
    for _, idx in _shuffled_batches(len(train_graphs), config.batch_size, config.max_epochs, config.seed):
        opt2.zero_grad(set_to_none=True)
        losses = [torch.mean(torch.abs(targs[i] - net(zs[i]))) for i in idx]
        torch.stack(losses).mean().backward()
        opt2.step()
    with torch.no_grad():
        return np.concatenate([net(latents(g)).numpy() for g in datasets[test_region]])


def run_baseline(
    name: str,
    datasets: dict[str, list[RegionGraph]],
    config: ExperimentConfig,
) -> MetricsReport:
    """Train one baseline on the training regions and score the held-out one.

    ``datasets`` must contain the held-out region named by
    ``config.held_out_region``; remaining regions form the training split,
    matching the proposed model's SplitPlan exactly.
    """
    if name not in BASELINES:
        raise ConfigurationError(f"unknown baseline {name!r}, expected one of {BASELINES}")
    test_region = config.held_out_region
    if test_region not in datasets:
        raise ConfigurationError(f"held-out region {test_region!r} missing from datasets")
    train_regions = tuple(sorted(r for r in datasets if r != test_region))
    if len(train_regions) < 2:
        raise ConfigurationError("baselines need >=2 training regions")
    test_graphs = datasets[test_region]
    actual = np.concatenate([g.targets for g in test_graphs])

    if name == "gcn_direct":
        train_items = [graph_tensors(g) for rid in train_regions for g in datasets[rid]]
        preds = _run_gcn_direct(train_items, test_graphs, config)
    elif name == "node_embedding_mlp":
        preds = _run_node_embedding_mlp(datasets, train_regions, test_region, config)
    else:
        preds = _run_graph_ae(datasets, train_regions, test_region, config)

    return _metrics(name, test_region, preds, actual, len(test_graphs), config, [])


def render_report(reports: list[MetricsReport], out_dir: str | Path) -> dict[str, Path]:
    """Write the JSON summary and a grouped accuracy bar chart.

    File names are deterministic and the JSON contains no timestamps, so rerun
    outputs are byte-identical for the same inputs.
    """
    if not reports:
        raise ConfigurationError("render_report needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    json_path.write_text(
        json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True)
    )

    regions = sorted({r.region for r in reports})
    methods = sorted({r.method for r in reports})
    acc = {(r.method, r.region): r.accuracy for r in reports}
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(regions), 4.0))
    width = 0.8 / max(1, len(methods))
    xs = np.arange(len(regions))
    for mi, method in enumerate(methods):
        vals = [acc.get((method, region), np.nan) for region in regions]
        ax.bar(xs + mi * width, vals, width=width, label=method)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels([f"held-out {r}" for r in regions])
    ax.set_ylabel("one-off accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    png_path = out / "accuracy_by_method.png"
    fig.savefig(png_path)
    plt.close(fig)
    return {"json": json_path, "chart": png_path}
