"""Disentangled graph model: two variational GCN encoders over one input graph.

The region-agnostic latent z feeds a per-node demand regressor; the
region-specific latent z_r feeds a graph-level region classifier after mean
pooling.  A parameter-free inner-product decoder reconstructs the binary
adjacency from the concatenated latents.  Three losses shape the spaces:

* ``loss_elbo``       -- negative evidence lower bound: class-weighted BCE on
                         the reconstructed adjacency plus one KL regularizer
                         per latent space against a unit Gaussian prior.
* ``loss_task_specific``        -- demand MAE from z plus region
                         cross-entropy from z_r.
* ``loss_independent_excitation`` -- the negated cross-wired task loss
                         (demand from z_r, region from z); minimizing it
                         drives each latent to be useless for the other task.

Training alternates a main phase (elbo + task loss, all parameters) with an
adversarial phase (excitation loss, encoder parameters only).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractViolationError, NumericalFailureError
from .graphs import RegionGraph

DTYPE = torch.float64

LOGVAR_CLAMP = 10.0


@dataclass
class ModelConfig:
    in_dim: int
    n_regions: int
    hidden1: int = 64
    hidden2: int = 64
    latent_dim: int = 32
    head_hidden: int = 64
    lambda_elbo: float = 1.0
    lambda_ts: float = 1.0
    lambda_ie: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def gcn_layer(
    h: torch.Tensor,
    adjacency_norm: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    activation: str = "none",
) -> torch.Tensor:
    """One graph convolution: activation(A_norm @ H @ W (+ b))."""
    if h.shape[-1] != weight.shape[0] or adjacency_norm.shape[-1] != h.shape[-2]:
        raise ContractViolationError(
            f"gcn_layer shapes do not conform: A {tuple(adjacency_norm.shape)}, "
            f"H {tuple(h.shape)}, W {tuple(weight.shape)}"
        )
    out = adjacency_norm @ h @ weight
    if bias is not None:
        out = out + bias
    if activation == "relu":
        return torch.relu(out)
    if activation == "none":
        return out
    raise ContractViolationError(f"unknown activation {activation!r}")


def _glorot(weight: torch.Tensor, generator: torch.Generator) -> None:
    bound = math.sqrt(6.0 / (weight.shape[0] + weight.shape[1]))
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)


@dataclass
class LatentSample:
    """Per-node posterior parameters and a reparameterized draw."""

    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor


def reparameterize(
    mu: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None
) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps, or just mu in deterministic mode."""
    if generator is None:
        return mu
    eps = torch.empty(mu.shape, dtype=mu.dtype).normal_(generator=generator)
    return mu + torch.exp(0.5 * logvar) * eps


class GCNEncoder(nn.Module):
    """Three GCN layers: ReLU trunk, third layer split into mu/logvar heads."""

    def __init__(self, in_dim: int, hidden1: int, hidden2: int, latent_dim: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(in_dim, hidden1, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(hidden1, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(hidden1, hidden2, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(hidden2, dtype=DTYPE))
        self.w_mu = nn.Parameter(torch.empty(hidden2, latent_dim, dtype=DTYPE))
        self.b_mu = nn.Parameter(torch.zeros(latent_dim, dtype=DTYPE))
        self.w_logvar = nn.Parameter(torch.empty(hidden2, latent_dim, dtype=DTYPE))
        self.b_logvar = nn.Parameter(torch.zeros(latent_dim, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator) -> None:
        for w in (self.w1, self.w2, self.w_mu, self.w_logvar):
            _glorot(w, generator)
        for b in (self.b1, self.b2, self.b_mu, self.b_logvar):
            with torch.no_grad():
                b.zero_()

    def forward(
        self,
        x: torch.Tensor,
        adjacency_norm: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> LatentSample:
        """Encode node features; sample z unless generator is None (eval mode)."""
        h = gcn_layer(x, adjacency_norm, self.w1, self.b1, "relu")
        h = gcn_layer(h, adjacency_norm, self.w2, self.b2, "relu")
        mu = gcn_layer(h, adjacency_norm, self.w_mu, self.b_mu, "none")
        logvar = gcn_layer(h, adjacency_norm, self.w_logvar, self.b_logvar, "none")
        logvar = torch.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        z = reparameterize(mu, logvar, generator)
        if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
            raise NumericalFailureError("NaN/Inf in encoder outputs")
        return LatentSample(mu=mu, logvar=logvar, z=z)


class DemandRegressor(nn.Module):
    """Per-node demand head: latent -> hidden (ReLU) -> softplus scalar."""

    def __init__(self, latent_dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(latent_dim, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for lin in (self.lin1, self.lin2):
            _glorot(lin.weight, generator)
            with torch.no_grad():
                lin.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.lin1(z))
        return torch.nn.functional.softplus(self.lin2(h)).squeeze(-1)


class RegionClassifier(nn.Module):
    """Graph-level head: mean-pool nodes, then FC stack to region logits."""

    def __init__(self, latent_dim: int, hidden: int, n_regions: int):
        super().__init__()
        self.lin1 = nn.Linear(latent_dim, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, n_regions, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for lin in (self.lin1, self.lin2):
            _glorot(lin.weight, generator)
            with torch.no_grad():
                lin.bias.zero_()

    def forward(self, z_r: torch.Tensor) -> torch.Tensor:
        pooled = z_r.mean(dim=-2)
        h = torch.relu(self.lin1(pooled))
        return self.lin2(h)


class DisentangledModel(nn.Module):
    """Both encoders plus heads, with the region vocabulary baked in."""

    def __init__(self, config: ModelConfig, region_vocab: tuple[str, ...], seed: int = 0):
        super().__init__()
        if len(region_vocab) != config.n_regions:
            raise ContractViolationError(
                f"vocab size {len(region_vocab)} != n_regions {config.n_regions}"
            )
        self.config = config
        self.region_vocab = tuple(region_vocab)
        self.enc_agnostic = GCNEncoder(
            config.in_dim, config.hidden1, config.hidden2, config.latent_dim
        )
        self.enc_specific = GCNEncoder(
            config.in_dim, config.hidden1, config.hidden2, config.latent_dim
        )
        self.regressor = DemandRegressor(config.latent_dim, config.head_hidden)
        self.classifier = RegionClassifier(
            config.latent_dim, config.head_hidden, config.n_regions
        )
        gen = torch.Generator().manual_seed(seed)
        for module in (self.enc_agnostic, self.enc_specific, self.regressor, self.classifier):
            module.reset_parameters(gen)

    def encoder_parameters(self):
        yield from self.enc_agnostic.parameters()
        yield from self.enc_specific.parameters()

    def head_parameters(self):
        yield from self.regressor.parameters()
        yield from self.classifier.parameters()

    def region_index(self, region_id: str) -> int:
        try:
            return self.region_vocab.index(region_id)
        except ValueError:
            raise ContractViolationError(
                f"region {region_id!r} not in training vocabulary {self.region_vocab}"
            ) from None


def decode_adjacency_logits(z: torch.Tensor, z_r: torch.Tensor) -> torch.Tensor:
    z_full = torch.cat([z, z_r], dim=-1)
    raw = z_full @ z_full.transpose(-1, -2)
    # BLAS Gram matrices are only approximately symmetric; averaging with the
    # transpose makes symmetry bitwise without changing the math.
    return 0.5 * (raw + raw.transpose(-1, -2))


def decode_adjacency(z: torch.Tensor, z_r: torch.Tensor) -> torch.Tensor:
    """Inner-product decoder: sigmoid(concat latents dot products), symmetric."""
    probs = torch.sigmoid(decode_adjacency_logits(z, z_r))
    # vectorized sigmoid can round the same input differently in the SIMD main
    # loop and the scalar tail, so symmetrize the probabilities too
    return 0.5 * (probs + probs.transpose(-1, -2))


def kl_diag_gaussian(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, e^logvar) || N(0, I)) summed over dims, averaged over nodes."""
    per_node = -0.5 * torch.sum(1.0 + logvar - mu.pow(2) - torch.exp(logvar), dim=-1)
    return per_node.mean()


def _edge_bce(logits: torch.Tensor, adjacency_binary: torch.Tensor) -> torch.Tensor:
    """Class-weighted BCE, normalized by the total weight mass.

    Positive-class weight is (#non-edges / #edges); if either class is empty
    the weight falls back to 1.0 with a warning.
    """
    n_pos = adjacency_binary.sum()
    n_neg = adjacency_binary.numel() - n_pos
    if n_pos.item() == 0 or n_neg.item() == 0:
        warnings.warn("degenerate adjacency (all edges or no edges); BCE weight = 1.0")
        pos_weight = torch.tensor(1.0, dtype=logits.dtype)
    else:
        pos_weight = n_neg / n_pos
    elementwise = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, adjacency_binary, reduction="none"
    )
    weights = torch.where(adjacency_binary > 0.5, pos_weight, torch.ones_like(elementwise))
    return (weights * elementwise).sum() / weights.sum()


def loss_elbo(
    sample_agn: LatentSample,
    sample_spec: LatentSample,
    adjacency_binary: torch.Tensor,
) -> tuple[torch.Tensor, dict]:
    """Negative ELBO: weighted adjacency BCE + KL of both latent spaces."""
    logits = decode_adjacency_logits(sample_agn.z, sample_spec.z)
    bce = _edge_bce(logits, adjacency_binary)
    kl_agn = kl_diag_gaussian(sample_agn.mu, sample_agn.logvar)
    kl_spec = kl_diag_gaussian(sample_spec.mu, sample_spec.logvar)
    total = bce + kl_agn + kl_spec
    parts = {
        "recon_bce": float(bce.detach()),
        "kl_agnostic": float(kl_agn.detach()),
        "kl_specific": float(kl_spec.detach()),
    }
    return total, parts


def loss_task_specific(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    logits_spec: torch.Tensor,
    region_index: int,
) -> torch.Tensor:
    """Demand MAE plus region cross-entropy for one graph."""
    n_regions = logits_spec.shape[-1]
    if not 0 <= region_index < n_regions:
        raise ContractViolationError(f"region index {region_index} not in [0, {n_regions})")
    mae = torch.mean(torch.abs(y - y_hat))
    ce = torch.nn.functional.cross_entropy(
        logits_spec.unsqueeze(0),
        torch.tensor([region_index], dtype=torch.long, device=logits_spec.device),
    )
    return mae + ce


def loss_independent_excitation(
    y_hat_from_zr: torch.Tensor,
    y: torch.Tensor,
    logits_from_z: torch.Tensor,
    region_index: int,
) -> torch.Tensor:
    """Negated cross-wired task loss; identical to -loss_task_specific(swapped)."""
    return -loss_task_specific(y_hat_from_zr, y, logits_from_z, region_index)


def graph_tensors(graph: RegionGraph) -> dict:
    """Torch views of a RegionGraph, built once and reused across epochs."""
    return {
        "x": torch.as_tensor(graph.node_features, dtype=DTYPE),
        "adj_norm": torch.as_tensor(graph.adjacency_norm, dtype=DTYPE),
        "adj_bin": torch.as_tensor(graph.binary_adjacency(), dtype=DTYPE),
        "y": torch.as_tensor(graph.targets, dtype=DTYPE),
        "region_id": graph.region_id,
    }


def _stack_items(items: list[dict], model: DisentangledModel) -> dict:
    return {
        "x": torch.stack([it["x"] for it in items]),
        "adj_norm": torch.stack([it["adj_norm"] for it in items]),
        "adj_bin": torch.stack([it["adj_bin"] for it in items]),
        "y": torch.stack([it["y"] for it in items]),
        "region_idx": torch.tensor(
            [model.region_index(it["region_id"]) for it in items], dtype=torch.long
        ),
    }


def _edge_bce_batched(logits: torch.Tensor, adjacency_binary: torch.Tensor) -> torch.Tensor:
    """Per-graph class-weighted BCE over a [B, V, V] stack, averaged over B."""
    n_pos = adjacency_binary.sum(dim=(-2, -1), keepdim=True)
    n_total = adjacency_binary.shape[-1] * adjacency_binary.shape[-2]
    n_neg = n_total - n_pos
    pos_weight = torch.where(
        (n_pos > 0) & (n_neg > 0), n_neg / n_pos.clamp(min=1.0), torch.ones_like(n_pos)
    )
    elementwise = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, adjacency_binary, reduction="none"
    )
    weights = torch.where(adjacency_binary > 0.5, pos_weight.expand_as(elementwise),
                          torch.ones_like(elementwise))
    per_graph = (weights * elementwise).sum(dim=(-2, -1)) / weights.sum(dim=(-2, -1))
    return per_graph.mean()


def batched_phase_loss(
    model: DisentangledModel,
    items: list[dict],
    phase: str,
    generator: torch.Generator | None,
) -> tuple[torch.Tensor, dict]:
    """Mean phase loss over a batch, vectorized across same-shape graphs.

    Graphs are grouped by node count so mixed-size batches still work; within
    a group the computation is identical to per-graph total_loss up to float
    summation order.  Diagnostics are batch means of the same components.
    """
    if phase not in ("main", "adversarial"):
        raise ContractViolationError(f"unknown phase {phase!r}")
    groups: dict[tuple, list[dict]] = {}
    for it in items:
        groups.setdefault(tuple(it["x"].shape), []).append(it)

    cfg = model.config
    total_losses = []
    diag_sums: dict[str, float] = {}
    for shape in sorted(groups):
        group = groups[shape]
        g = _stack_items(group, model)
        b = len(group)
        sample_agn = model.enc_agnostic(g["x"], g["adj_norm"], generator)
        sample_spec = model.enc_specific(g["x"], g["adj_norm"], generator)
        if phase == "main":
            logits_rec = decode_adjacency_logits(sample_agn.z, sample_spec.z)
            bce = _edge_bce_batched(logits_rec, g["adj_bin"])
            kl_agn = kl_diag_gaussian(sample_agn.mu, sample_agn.logvar)
            kl_spec = kl_diag_gaussian(sample_spec.mu, sample_spec.logvar)
            elbo = bce + kl_agn + kl_spec
            y_hat = model.regressor(sample_agn.z)
            logits = model.classifier(sample_spec.z)
            mae = torch.mean(torch.abs(g["y"] - y_hat))
            ce = torch.nn.functional.cross_entropy(logits, g["region_idx"])
            ts = mae + ce
            loss = cfg.lambda_elbo * elbo + cfg.lambda_ts * ts
            parts = {
                "recon_bce": float(bce.detach()),
                "kl_agnostic": float(kl_agn.detach()),
                "kl_specific": float(kl_spec.detach()),
                "loss_elbo": float(elbo.detach()),
                "loss_ts": float(ts.detach()),
                "mae": float(mae.detach()),
            }
        else:
            y_hat_cross = model.regressor(sample_spec.z)
            logits_cross = model.classifier(sample_agn.z)
            mae = torch.mean(torch.abs(g["y"] - y_hat_cross))
            ce = torch.nn.functional.cross_entropy(logits_cross, g["region_idx"])
            ie = -(mae + ce)
            loss = cfg.lambda_ie * ie
            parts = {"loss_ie": float(ie.detach())}
        parts["total"] = float(loss.detach())
        total_losses.append(loss * b)
        for k, v in parts.items():
            diag_sums[k] = diag_sums.get(k, 0.0) + v * b

    n = len(items)
    total = torch.stack(total_losses).sum() / n
    diagnostics = {k: v / n for k, v in diag_sums.items()}
    if not math.isfinite(diagnostics["total"]):
        raise NumericalFailureError(f"non-finite {phase} loss", diagnostics=diagnostics)
    return total, diagnostics


def total_loss(
    model: DisentangledModel,
    graph: RegionGraph | dict,
    phase: str,
    generator: torch.Generator | None,
) -> tuple[torch.Tensor, dict]:
    """Phase loss for one graph with per-component diagnostics.

    main:        lambda_elbo * loss_elbo + lambda_ts * loss_task_specific
    adversarial: lambda_ie * loss_independent_excitation (cross-wired heads;
                 callers must step only encoder parameters in this phase).
    """
    if phase not in ("main", "adversarial"):
        raise ContractViolationError(f"unknown phase {phase!r}")
    g = graph if isinstance(graph, dict) else graph_tensors(graph)
    cfg = model.config
    r = model.region_index(g["region_id"])

    sample_agn = model.enc_agnostic(g["x"], g["adj_norm"], generator)
    sample_spec = model.enc_specific(g["x"], g["adj_norm"], generator)

    diagnostics: dict[str, float] = {}
    if phase == "main":
        elbo, parts = loss_elbo(sample_agn, sample_spec, g["adj_bin"])
        y_hat = model.regressor(sample_agn.z)
        logits = model.classifier(sample_spec.z)
        ts = loss_task_specific(y_hat, g["y"], logits, r)
        total = cfg.lambda_elbo * elbo + cfg.lambda_ts * ts
        diagnostics.update(parts)
        diagnostics["loss_elbo"] = float(elbo.detach())
        diagnostics["loss_ts"] = float(ts.detach())
        diagnostics["mae"] = float(torch.mean(torch.abs(g["y"] - y_hat)).detach())
    else:
        y_hat_cross = model.regressor(sample_spec.z)
        logits_cross = model.classifier(sample_agn.z)
        ie = loss_independent_excitation(y_hat_cross, g["y"], logits_cross, r)
        total = cfg.lambda_ie * ie
        diagnostics["loss_ie"] = float(ie.detach())

    diagnostics["total"] = float(total.detach())
    if not math.isfinite(diagnostics["total"]):
        raise NumericalFailureError(
            f"non-finite {phase} loss", diagnostics=diagnostics
        )
    return total, diagnostics
