"""Projection heads and single-, two- and multi-view contrastive losses.

Similarity between embeddings is d(u, v) = exp(cos(u, v) / tau).  Every loss
here is a negated log-probability, so it is nonnegative and minimized when
positives dominate their negatives.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

NORM_EPS = 1e-12


class ProjectionHead(nn.Module):
    """Three linear layers from a flattened feature map to an embedding.

    Feature maps are first average-pooled to ``pool`` x ``pool`` so the
    input width does not grow with image size.
    """

    def __init__(self, in_channels, pool=4, widths=(512, 256, 128)):
        super().__init__()
        self.pool = pool
        in_dim = in_channels * pool * pool
        self.net = nn.Sequential(
            nn.Linear(in_dim, widths[0]), nn.ReLU(inplace=True),
            nn.Linear(widths[0], widths[1]), nn.ReLU(inplace=True),
            nn.Linear(widths[1], widths[2]),
        )
        self.out_dim = widths[2]

    def forward(self, features):
        if features.dim() == 4:
            features = F.adaptive_avg_pool2d(features, self.pool)
        return self.net(features.flatten(1))


def _normalize(x):
    norm = x.norm(dim=-1, keepdim=True)
    return x / norm.clamp_min(NORM_EPS)


def _check_tau(tau):
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau!r}")


def cosine_logits(u, v, tau):
    """cos(u_a, v_b) / tau for all pairs; (..., A, D) x (..., B, D) -> (..., A, B)."""
    _check_tau(tau)
    return _normalize(u) @ _normalize(v).transpose(-1, -2) / tau


def similarity(u, v, tau=1.0):
    """exp(cos(u, v) / tau) for a single pair (or paired batches)."""
    _check_tau(tau)
    u = torch.as_tensor(u, dtype=torch.float64) if not torch.is_tensor(u) else u
    v = torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
    if (u.norm(dim=-1) <= NORM_EPS).any() or (v.norm(dim=-1) <= NORM_EPS).any():
        raise ValidationError("similarity is undefined for zero-norm vectors")
    cos = (_normalize(u) * _normalize(v)).sum(-1)
    return torch.exp(cos / tau)


def single_view_loss(positive_score, bank_scores):
    """-log d(x) / (d(x) + sum_i d(y_i)) from raw (positive) discriminator scores."""
    pos = torch.as_tensor(positive_score, dtype=torch.float64)
    bank = torch.as_tensor(bank_scores, dtype=torch.float64)
    if bank.numel() == 0:
        raise ValidationError("memory bank is empty")
    if (pos <= 0).any() or (bank <= 0).any():
        raise ValidationError("discriminator scores must be positive")
    return -(torch.log(pos) - torch.log(pos + bank.sum(-1)))


def _infonce_from_logits(logits, positive_index):
    # rows are anchors; column ``positive_index[row]`` holds the positive
    return F.cross_entropy(logits, positive_index, reduction="none")


def two_view_loss(view1, view2, tau=0.1, reduction="mean"):
    """Symmetric InfoNCE between index-matched rows of two batches.

    Each direction treats the other batch as candidates: the matched row is
    the positive, the remaining rows are negatives.  The two directions are
    summed and averaged over the batch.
    """
    if view1.shape != view2.shape:
        raise ValidationError(f"batch shapes differ: {tuple(view1.shape)} vs {tuple(view2.shape)}")
    if view1.shape[0] < 2:
        raise ValidationError("two_view_loss needs at least 2 samples for negatives")
    logits = cosine_logits(view1, view2, tau)
    target = torch.arange(view1.shape[0], device=view1.device)
    per_sample = _infonce_from_logits(logits, target) + _infonce_from_logits(logits.T, target)
    return per_sample.mean() if reduction == "mean" else per_sample


def multiview_loss(latents, selected_views, masks=None, mode="self", tau=0.1,
                   return_parts=False):
    """Contrast each latent with its own selected views across the batch.

    ``latents`` (B, D), ``selected_views`` (B, M, D), ``masks`` (B, D) in semi
    mode.  For the pair (latent_j, view_j^i):

    * latent anchor: candidates are view_j^i plus every selected view of every
      other sample k != j;
    * view anchor: candidates are latent_j plus the latents of every k != j.

    Both directions are summed and averaged over B * M pairs.  Semi mode adds
    the symmetric (latent_j, mask_j) term with cross-sample mask negatives.
    """
    if mode not in ("self", "semi"):
        raise ConfigurationError(f"mode must be 'self' or 'semi', got {mode!r}")
    if mode == "semi" and masks is None:
        raise ConfigurationError("semi-supervised mode requires mask embeddings")
    if mode == "self" and masks is not None:
        raise ConfigurationError("mask embeddings given in self-supervised mode")
    b, m = selected_views.shape[:2]
    if b < 2:
        raise ValidationError("multiview_loss needs at least 2 samples for negatives")
    if m < 1:
        raise ValidationError("need at least one selected view")
    if latents.shape[0] != b:
        raise ValidationError("latents and views disagree on batch size")

    _check_tau(tau)
    z = _normalize(latents)
    v = _normalize(selected_views)
    # pos[j, i] = cos(z_j, v_j^i) / tau
    pos = torch.einsum("jd,jid->ji", z, v) / tau
    # cross[j, k, i] = cos(z_j, v_k^i) / tau
    cross = torch.einsum("jd,kid->jki", z, v) / tau
    other = ~torch.eye(b, dtype=torch.bool, device=z.device)

    # latent anchor: positive pos[j, i], negatives cross[j, k, :] for k != j
    neg_lat = cross[other].reshape(b, (b - 1) * m)
    lse_neg_lat = torch.logsumexp(neg_lat, dim=1, keepdim=True)
    lat_dir = torch.logaddexp(pos, lse_neg_lat.expand(b, m)) - pos

    # view anchor v_j^i: positive pos[j, i], negatives cross[k, j, i] for k != j
    crossT = cross.permute(1, 2, 0)  # [j, i, k] = cos(z_k, v_j^i)
    neg_view = crossT.masked_fill(~other[:, None, :], float("-inf"))
    lse_neg_view = torch.logsumexp(neg_view, dim=2)
    view_dir = torch.logaddexp(pos, lse_neg_view) - pos

    view_term = (lat_dir + view_dir).mean()
    if mode == "self":
        return (view_term, view_term.new_zeros(())) if return_parts else view_term
    mask_term = two_view_loss(latents, masks, tau)
    total = view_term + mask_term
    return (view_term, mask_term) if return_parts else total


def candidate_counts(batch_size, n_selected):
    """Candidate-set sizes of the (latent-anchor, view-anchor) directions."""
    return 1 + (batch_size - 1) * n_selected, batch_size


def infonce_mi_bound(loss, batch_size, n_selected):
    """Lower bound on I(latent; view) implied by a symmetric multiview loss.

    Each direction satisfies I >= log(candidates) - loss_direction; summing the
    two directions and halving gives the bound for the symmetric loss.
    """
    n_lat, n_view = candidate_counts(batch_size, n_selected)
    return 0.5 * (math.log(n_lat) + math.log(n_view) - float(loss))
