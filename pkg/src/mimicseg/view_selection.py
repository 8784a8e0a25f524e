"""Rank frequency views by estimated MI with the latent and keep the top fraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ValidationError
from .info_metrics import MiEstimatorState, per_view_scores


def selection_count(n_views: int, sigma: float) -> int:
    """max(1, ceil(J * sigma))."""
    check_sigma(sigma)
    if n_views < 1:
        raise ConfigurationError("need at least one view")
    # round before ceil so 64 * 0.2 = 12.800000000000002 does not drift
    return max(1, math.ceil(round(n_views * sigma, 9)))


def check_sigma(sigma: float):
    if not (0.0 < sigma <= 1.0):
        raise ConfigurationError(f"sigma must lie in (0, 1], got {sigma!r}")


@dataclass
class MiRanking:
    scores: list  # [(view_index, estimate)], descending
    selected: list

    @classmethod
    def from_scores(cls, estimates, sigma: float) -> "MiRanking":
        """Descending sort; ties go to the lower (lower-frequency) view index."""
        estimates = np.asarray(estimates, dtype=np.float64)
        order = np.lexsort((np.arange(len(estimates)), -estimates))
        scores = [(int(i), float(estimates[i])) for i in order]
        m = selection_count(len(estimates), sigma)
        return cls(scores=scores, selected=[i for i, _ in scores[:m]])

    def estimate_of(self, view_index: int) -> float:
        return dict(self.scores)[view_index]


def rank_views(latent, cube_views, estimator: MiEstimatorState, sigma: float,
               generator=None):
    """Per-sample rankings of views by pointwise MI with the latent.

    ``latent`` is (B, D) and ``cube_views`` is (B, J, E).  The estimator is
    used in evaluation mode only.  Returns ``(rankings, scores)`` where
    ``scores`` is the (B, J) tensor of pointwise estimates.
    """
    check_sigma(sigma)
    if cube_views.shape[1] < 1:
        raise ConfigurationError("need at least one view")
    critic = estimator.critic
    was_training = critic.training
    critic.eval()
    with torch.no_grad():
        scores, _, _ = per_view_scores(critic, latent, cube_views, generator)
    critic.train(was_training)
    rankings = [MiRanking.from_scores(row, sigma) for row in scores.cpu().numpy()]
    return rankings, scores


def selected_index_tensor(rankings) -> torch.Tensor:
    return torch.tensor([r.selected for r in rankings], dtype=torch.long)


def mi_loss(rankings, scores=None):
    """Negated mean MI over each sample's selected views, averaged over the batch.

    With ``scores`` (a differentiable (B, J) tensor) the result is a tensor
    that carries gradients; otherwise the stored estimates are used.
    """
    if len(rankings) == 0:
        raise ValidationError("mi_loss needs a nonempty batch")
    if any(len(r.selected) == 0 for r in rankings):
        raise ValidationError("a ranking has an empty selection")
    if scores is None:
        per_sample = [np.mean([r.estimate_of(i) for i in r.selected]) for r in rankings]
        return -float(np.mean(per_sample))
    idx = selected_index_tensor(rankings).to(scores.device)
    return -torch.gather(scores, 1, idx).mean(dim=1).mean()


def selection_histogram(rankings, n_views: int) -> np.ndarray:
    counts = np.zeros(n_views, dtype=np.int64)
    for r in rankings:
        counts[r.selected] += 1
    return counts
