"""Entropy and mutual information: exact discrete oracle plus a MINE estimator.

All values are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import ValidationError

_TOL = 1e-9


def nats_to_bits(value):
    return value / math.log(2.0)


def _check_distribution(p, name="distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValidationError(f"{name} is empty")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > _TOL:
        raise ValidationError(f"{name} sums to {p.sum()!r}, expected 1")
    return p


def _xlogy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    nz = np.broadcast_to(x > 0, out.shape)
    out[nz] = (x * np.log(np.where(x > 0, y, 1.0)))[nz]
    return out


def discrete_entropy(marginal) -> float:
    """H(X) = -sum p log p with 0 log 0 = 0."""
    p = _check_distribution(marginal, "marginal")
    return float(max(0.0, -_xlogy(p, p).sum()))


@dataclass(frozen=True)
class DiscreteJoint:
    table: np.ndarray

    def __post_init__(self):
        table = _check_distribution(self.table, "joint table")
        if table.ndim != 2:
            raise ValidationError(f"joint table must be 2D, got shape {table.shape}")
        object.__setattr__(self, "table", table)

    @property
    def px(self):
        return self.table.sum(axis=1)

    @property
    def py(self):
        return self.table.sum(axis=0)


def _as_joint(joint) -> DiscreteJoint:
    return joint if isinstance(joint, DiscreteJoint) else DiscreteJoint(np.asarray(joint))


def conditional_entropy(joint) -> float:
    """H(X|Y) = -sum_{x,y} p(x,y) log p(x|y), rows indexing X."""
    j = _as_joint(joint)
    py = j.py[None, :]
    cond = np.divide(j.table, py, out=np.zeros_like(j.table), where=py > 0)
    return float(-_xlogy(j.table, cond).sum())


def discrete_mi_oracle(joint) -> float:
    """Exact I(X;Y) by the double sum of p(x,y) log p(x,y)/(p(x)p(y))."""
    j = _as_joint(joint)
    outer = np.outer(j.px, j.py)
    ratio = np.divide(j.table, outer, out=np.ones_like(j.table), where=outer > 0)
    return float(max(0.0, _xlogy(j.table, ratio).sum()))


def gaussian_mi(rho: float) -> float:
    """Closed-form MI of a bivariate normal with correlation ``rho``."""
    if not -1.0 < rho < 1.0:
        raise ValidationError(f"correlation must lie in (-1, 1), got {rho!r}")
    return max(0.0, -0.5 * math.log1p(-rho * rho))


class Critic(nn.Module):
    """Statistics network T(u, v) -> R.

    With ``n_views`` set, a learned view-index embedding is appended to the
    input so one network scores every view.
    """

    def __init__(self, u_dim, v_dim, hidden=128, n_views=None, view_dim=16):
        super().__init__()
        self.view_embed = nn.Embedding(n_views, view_dim) if n_views else None
        in_dim = u_dim + v_dim + (view_dim if n_views else 0)
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, u, v, view_index=None):
        parts = [u, v]
        if self.view_embed is not None:
            if view_index is None:
                raise ValueError("view_index is required for a view-conditioned critic")
            parts.append(self.view_embed(view_index))
        return self.net(torch.cat(parts, dim=-1)).squeeze(-1)


class PerViewCritics(nn.Module):
    """One independent critic per view, called like a view-conditioned :class:`Critic`."""

    def __init__(self, u_dim, v_dim, n_views, hidden=128):
        super().__init__()
        self.critics = nn.ModuleList(Critic(u_dim, v_dim, hidden) for _ in range(n_views))

    def forward(self, u, v, view_index=None):
        if view_index is None:
            raise ValueError("view_index is required for per-view critics")
        out = u.new_empty(u.shape[0])
        for j in torch.unique(view_index).tolist():
            rows = view_index == j
            out[rows] = self.critics[j](u[rows], v[rows])
        return out


def _logmeanexp(t, dim=0):
    return torch.logsumexp(t, dim=dim) - math.log(t.shape[dim])


class MiEstimatorState:
    """Critic, its optimizer, and the EMA of E_marginal[e^T] used for bias correction."""

    def __init__(self, critic: nn.Module, lr=1e-3, ema_decay=0.99, optimizer=None):
        self.critic = critic
        self.ema_decay = ema_decay
        self.ema_denominator: Optional[float] = None
        self.step = 0
        self.optimizer = optimizer or torch.optim.Adam(critic.parameters(), lr=lr)

    def parameters(self):
        return self.critic.parameters()

    def state_dict(self):
        return {
            "critic": self.critic.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "ema_denominator": self.ema_denominator,
            "step": self.step,
        }

    def load_state_dict(self, state):
        self.critic.load_state_dict(state["critic"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.ema_denominator = state["ema_denominator"]
        self.step = state["step"]


def dv_bound(t_joint, t_marginal):
    """Donsker-Varadhan bound E_joint[T] - log E_marginal[e^T]."""
    return t_joint.mean() - _logmeanexp(t_marginal.reshape(-1))


def shuffle_marginal(v, generator=None):
    """Pair u with a permuted v to sample the product of marginals."""
    perm = torch.randperm(v.shape[0], generator=generator)
    return v[perm]


def _check_batch(u, v):
    if u.shape[0] < 2:
        raise ValidationError("MINE needs a batch of at least 2 samples")
    if u.shape[0] != v.shape[0]:
        raise ValidationError(f"batch sizes differ: {u.shape[0]} vs {v.shape[0]}")


def mine_estimate(pairs_joint, pairs_marginal, state: MiEstimatorState, train=False,
                  view_index=None):
    """One MINE evaluation, optionally advancing the critic by one step.

    ``pairs_joint`` is ``(u, v)`` drawn jointly, ``pairs_marginal`` is
    ``(u, v_shuffled)``.  In training mode the critic takes one gradient step
    on the EMA-corrected objective; otherwise the state is untouched.
    Returns ``(estimate, state)``.
    """
    u, v = pairs_joint
    u_m, v_m = pairs_marginal
    _check_batch(u, v)
    _check_batch(u_m, v_m)
    if u.shape[1:] != u_m.shape[1:] or v.shape[1:] != v_m.shape[1:]:
        raise ValidationError("joint and marginal batches have different embedding dims")
    critic = state.critic
    if not train:
        with torch.no_grad():
            t_j = critic(u, v, view_index) if view_index is not None else critic(u, v)
            t_m = critic(u_m, v_m, view_index) if view_index is not None else critic(u_m, v_m)
            return float(dv_bound(t_j, t_m)), state

    t_j = critic(u, v, view_index) if view_index is not None else critic(u, v)
    t_m = critic(u_m, v_m, view_index) if view_index is not None else critic(u_m, v_m)
    loss, estimate = _mine_objective(t_j, t_m, state)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(estimate), state


def _mine_objective(t_j, t_m, state: MiEstimatorState):
    # denominator gradient uses the running mean of E[e^T] instead of the batch value
    t_m = t_m.reshape(-1)
    batch_denom = torch.exp(_logmeanexp(t_m)).detach().item()
    if state.ema_denominator is None:
        state.ema_denominator = batch_denom
    else:
        state.ema_denominator = state.ema_decay * state.ema_denominator + (1 - state.ema_decay) * batch_denom
    estimate = dv_bound(t_j.detach(), t_m.detach())
    surrogate = t_j.mean() - torch.exp(_logmeanexp(t_m)) / state.ema_denominator
    return -surrogate, estimate


def fit_mine(state: MiEstimatorState, sampler, steps, generator=None):
    """Train the critic for ``steps`` batches drawn from ``sampler()`` -> (u, v)."""
    history = []
    for _ in range(steps):
        u, v = sampler()
        est, _ = mine_estimate((u, v), (u, shuffle_marginal(v, generator)), state, train=True)
        history.append(est)
    return history


def evaluate_mine(state: MiEstimatorState, u, v, generator=None):
    """Evaluation-mode DV estimate on a (large) held-out sample."""
    est, _ = mine_estimate((u, v), (u, shuffle_marginal(v, generator)), state, train=False)
    return est


def per_view_scores(critic: Critic, u, views, generator=None):
    """Pointwise DV scores for every (sample, view) pair.

    ``u`` is (B, D), ``views`` is (B, J, E).  Entry (b, j) is
    T(u_b, v_bj) - log mean_k exp T(u_k, v_{pi(k) j}); averaging a column over
    the batch gives the batch DV estimate for view j.
    """
    b, j = views.shape[:2]
    if b < 2:
        raise ValidationError("MINE needs a batch of at least 2 samples")
    view_idx = torch.arange(j, device=u.device).repeat(b)
    u_rep = u.repeat_interleave(j, dim=0)
    perm = torch.randperm(b, generator=generator)
    t_joint = critic(u_rep, views.reshape(b * j, -1), view_idx).reshape(b, j)
    t_marg = critic(u_rep, views[perm].reshape(b * j, -1), view_idx).reshape(b, j)
    return t_joint - _logmeanexp(t_marg, dim=0)[None, :], t_joint, t_marg


def train_view_critic(state: MiEstimatorState, u, views, generator=None):
    """One EMA-corrected step of the shared critic over all views; returns per-view estimates."""
    _, t_joint, t_marg = per_view_scores(state.critic, u, views, generator)
    loss, estimate = _mine_objective_per_view(t_joint, t_marg, state)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return estimate


def _mine_objective_per_view(t_joint, t_marg, state):
    # one EMA slot per view
    denom = torch.exp(_logmeanexp(t_marg, dim=0))
    batch_denom = denom.detach()
    if not torch.is_tensor(state.ema_denominator):
        state.ema_denominator = batch_denom
    else:
        state.ema_denominator = state.ema_decay * state.ema_denominator + (1 - state.ema_decay) * batch_denom
    surrogate = t_joint.mean(dim=0) - denom / state.ema_denominator
    estimate = (t_joint.mean(dim=0) - torch.log(denom)).detach()
    return -surrogate.sum(), estimate
