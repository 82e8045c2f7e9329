"""Loss functions for supervised and contrastive objectives.

All contrastive losses normalize embeddings onto the unit sphere internally,
so callers can pass raw projection-head outputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError


@dataclass
class ContrastiveLossConfig:
    lam: float = 1.0          # weight on the alignment term
    align_alpha: float = 2.0  # exponent on the pair distance
    uniform_t: float = 2.0    # temperature of the uniformity kernel
    temperature: float = 0.5  # InfoNCE / SupCon softmax temperature

    def validate(self):
        if self.align_alpha <= 0:
            raise ConfigError(f"align_alpha must be positive, got {self.align_alpha}")
        if self.uniform_t <= 0:
            raise ConfigError(f"uniform_t must be positive, got {self.uniform_t}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        return self


def _unit(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=1)


def cross_entropy(posteriors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log p[label] over the batch.

    `posteriors` rows must lie on the probability simplex (sum to 1 within
    1e-5, entries >= 0). Use `cross_entropy_logits` for the training path.
    """
    if posteriors.dim() != 2:
        raise ValueError(f"posteriors must be (B, C), got shape {tuple(posteriors.shape)}")
    if not torch.isfinite(posteriors).all():
        raise NumericError("non-finite posterior")
    if (posteriors < 0).any():
        raise ValueError("posteriors must be non-negative")
    row_sums = posteriors.sum(dim=1)
    if (row_sums - 1.0).abs().max().item() > 1e-5:
        raise ValueError("posterior rows must sum to 1")
    if labels.min().item() < 0 or labels.max().item() >= posteriors.shape[1]:
        raise ValueError("label out of range")
    picked = posteriors.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked).mean()


def cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def alignment_loss(a: torch.Tensor, b: torch.Tensor, alpha: float = 2.0) -> torch.Tensor:
    """E ||z_a - z_b||_2^alpha over positive pairs, embeddings unit-normalized."""
    za, zb = _unit(a), _unit(b)
    return (za - zb).norm(p=2, dim=1).pow(alpha).mean()


def uniformity_loss(embeddings: torch.Tensor, t: float = 2.0) -> torch.Tensor:
    """log E_{i != j} exp(-t ||z_i - z_j||^2) over ordered distinct pairs.

    Pairwise Gaussian-potential form; for unit vectors the squared distance is
    2 - 2 <z_i, z_j>, computed from the Gram matrix.
    """
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least 2 embeddings")
    z = _unit(embeddings)
    sq_dist = (2.0 - 2.0 * (z @ z.t())).clamp_min(0)
    neg_t_d2 = -t * sq_dist
    off_diag = ~torch.eye(n, dtype=torch.bool, device=z.device)
    vals = neg_t_d2[off_diag]
    return torch.logsumexp(vals, dim=0) - torch.log(
        torch.tensor(float(vals.numel()), dtype=z.dtype, device=z.device)
    )


def combined_cl_loss(a: torch.Tensor, b: torch.Tensor, cfg: ContrastiveLossConfig) -> torch.Tensor:
    """lam * alignment(a, b) + (uniformity(a) + uniformity(b)) / 2."""
    align = alignment_loss(a, b, cfg.align_alpha)
    unif = 0.5 * (uniformity_loss(a, cfg.uniform_t) + uniformity_loss(b, cfg.uniform_t))
    return cfg.lam * align + unif


def info_nce(a: torch.Tensor, b: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """NT-Xent over 2B stacked views: each anchor's positive is its other view,
    the remaining 2B-2 samples are negatives.
    """
    bsz = a.shape[0]
    if bsz != b.shape[0]:
        raise ValueError("view batches must match")
    if bsz < 2:
        raise ValueError("info_nce needs batch size >= 2")
    z = _unit(torch.cat([a, b], dim=0))
    n = 2 * bsz
    sim = (z @ z.t()) / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    pos_index = torch.arange(n, device=z.device)
    pos_index = torch.where(pos_index < bsz, pos_index + bsz, pos_index - bsz)
    pos = sim.gather(1, pos_index.view(-1, 1)).squeeze(1)
    return (torch.logsumexp(sim, dim=1) - pos).mean()


def sup_con_loss(embeddings: torch.Tensor, labels: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Supervised contrastive loss: per anchor, mean -log softmax over its
    same-label positives (self excluded); anchors with no positive are skipped.
    Returns 0 with a warning when no anchor has a positive.
    """
    n = embeddings.shape[0]
    if n != labels.shape[0]:
        raise ValueError("labels must match embeddings")
    if n < 2:
        raise ValueError("sup_con needs at least 2 embeddings")
    z = _unit(embeddings)
    sim = (z @ z.t()) / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos_mask = (labels.view(-1, 1) == labels.view(1, -1)) & ~self_mask
    pos_counts = pos_mask.sum(dim=1)
    valid = pos_counts > 0
    if not valid.any():
        warnings.warn("sup_con_loss: no anchor has a positive; returning 0")
        return torch.zeros((), dtype=z.dtype, device=z.device)
    # where() instead of multiply: the self-diagonal holds -inf and 0 * -inf is nan
    pos_log_prob = torch.where(pos_mask, log_prob, torch.zeros_like(log_prob))
    per_anchor = -pos_log_prob.sum(dim=1)[valid] / pos_counts[valid].to(z.dtype)
    return per_anchor.mean()
