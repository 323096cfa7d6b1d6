"""Adaptive-computation-time attention over past latent states.

A small sigmoid network scores each past state. Walking back from the most
recent state, each score is spent from a unit cost budget; once the budget
would fall to ``kappa`` or below (or history / ``max_lag`` runs out) the
remaining budget goes to the last state considered. The resulting weights
sum to one and their count is the effective autoregressive order.

The stop decision itself is not differentiated. Gradients flow through the
assigned weights, including the residual weight ``1 - sum(previous scores)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError

DEFAULT_KAPPA = 0.01
DEFAULT_MAX_LAG = 64


class ActmParams:
    """Weights of the scoring network: one tanh hidden layer, sigmoid output."""

    def __init__(self, latent_dim: int, hidden: int | None = None, rng=None, out_bias: float = 0.0):
        hidden = latent_dim if hidden is None else hidden
        rng = np.random.default_rng(rng)
        lim1 = np.sqrt(6.0 / (latent_dim + hidden))
        lim2 = np.sqrt(6.0 / (hidden + 1))
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.w1 = Tensor(rng.uniform(-lim1, lim1, (latent_dim, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-lim2, lim2, (hidden, 1)), requires_grad=True)
        self.b2 = Tensor(np.full(1, float(out_bias)), requires_grad=True)

    @classmethod
    def constant(cls, latent_dim: int, value: float, hidden: int | None = None) -> "ActmParams":
        """Network whose output is ``value`` for every input."""
        if not 0.0 < value < 1.0:
            raise ValueError("constant halting probability must lie in (0, 1)")
        p = cls(latent_dim, hidden, rng=0)
        p.w1.data[...] = 0.0
        p.w2.data[...] = 0.0
        p.b2.data[...] = np.log(value / (1.0 - value))
        return p

    def parameters(self) -> dict[str, Tensor]:
        return {"actm.w1": self.w1, "actm.b1": self.b1, "actm.w2": self.w2, "actm.b2": self.b2}

    def scores(self, z: Tensor) -> Tensor:
        """Halting probabilities for a batch ``(..., N)`` -> ``(...)``."""
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent width {z.shape[-1]} != {self.latent_dim}")
        lead = z.shape[:-1]
        # scale-free input: latents may shrink a lot during training
        flat = dc.rms_norm(dc.reshape(z, (-1, self.latent_dim)))
        h = dc.tanh(dc.add_bias(dc.matmul(flat, self.w1), self.b1))
        logits = dc.add_bias(dc.matmul(h, self.w2), self.b2)
        return dc.reshape(dc.sigmoid(logits), lead)


def halting_probability(z, p: ActmParams) -> float:
    z = np.asarray(z, dtype=float)
    if z.shape != (p.latent_dim,):
        raise ShapeError(f"expected a latent vector of width {p.latent_dim}, got shape {z.shape}")
    with dc.no_grad():
        return float(p.scores(Tensor(z[None, :])).data[0])


def _check_kappa(kappa: float) -> None:
    if not 0.0 < kappa < 0.5:
        raise ValueError(f"kappa must lie in (0, 0.5), got {kappa}")


def halting_walk(scores: Sequence[float], kappa: float = DEFAULT_KAPPA, max_lag: int = DEFAULT_MAX_LAG) -> list[float]:
    """Spend the unit budget over ``scores`` (newest first); return the weights.

    ``len(scores)`` plays the role of the time budget.
    """
    _check_kappa(kappa)
    if len(scores) == 0:
        raise ValueError("empty history")
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    limit = min(len(scores), max_lag)
    budget = 1.0
    weights: list[float] = []
    for k, f in enumerate(scores[:limit]):
        if k == limit - 1 or budget - f <= kappa:
            weights.append(budget)
            break
        weights.append(float(f))
        budget -= f
    return weights


@dataclass
class AttentionResult:
    weights: list[float]
    combined: np.ndarray
    order: int


def attend(history, p: ActmParams, kappa: float = DEFAULT_KAPPA, max_lag: int = DEFAULT_MAX_LAG) -> AttentionResult:
    """Attend over ``history`` given newest first (``history[0]`` is Z_t)."""
    if len(history) == 0:
        raise ValueError("empty history")
    _check_kappa(kappa)
    states = np.asarray(history, dtype=float)
    limit = min(len(states), max_lag)
    scores = [halting_probability(z, p) for z in states[:limit]]
    weights = halting_walk(scores, kappa, max_lag)
    combined = np.zeros_like(states[0])
    for w, z in zip(weights, states):
        combined = combined + w * z
    return AttentionResult(weights=weights, combined=combined, order=len(weights))


def halting_masks(scores: np.ndarray, kappa: float, max_lag: int):
    """Vectorised halting walk for every row of a ``(T, n)`` score matrix.

    Row ``t`` walks back over rows ``t, t-1, ...``. Returns ``orders`` (T, n)
    and boolean masks ``spent[k]`` / ``residual[k]`` of shape (T, n) saying
    whether lag ``k`` received its own score or the leftover budget.
    """
    _check_kappa(kappa)
    T, n = scores.shape
    avail = np.minimum(np.arange(1, T + 1), max_lag)[:, None] * np.ones((1, n), dtype=int)
    budget = np.ones((T, n))
    active = np.ones((T, n), dtype=bool)
    orders = np.zeros((T, n), dtype=int)
    spent: list[np.ndarray] = []
    residual: list[np.ndarray] = []
    k = 0
    while active.any():
        f = np.zeros((T, n))
        f[k:] = scores[: T - k]
        stop = active & ((k == avail - 1) | (budget - f <= kappa))
        go = active & ~stop
        residual.append(stop)
        spent.append(go)
        orders[stop] = k + 1
        budget = np.where(go, budget - f, budget)
        active = go
        k += 1
    return orders, spent, residual


def attend_batch(mixed: Tensor, p: ActmParams, kappa: float = DEFAULT_KAPPA, max_lag: int = DEFAULT_MAX_LAG):
    """Differentiable attention for every time row of ``mixed`` (T, n, N).

    Returns the combined states (T, n, N), the integer orders (T, n) and the
    weight matrix (T, n, K) with ``K`` the largest realised order.
    """
    T, n, N = mixed.shape
    if max_lag == 1:
        # single lag: the weight is always the full budget, scores are irrelevant
        return mixed, np.ones((T, n), dtype=int), np.ones((T, n, 1))
    scores = p.scores(mixed)
    orders, spent, residual = halting_masks(scores.data, kappa, max_lag)
    shifted_scores = []
    for k in range(len(spent)):
        shifted_scores.append(dc.shift(scores, k) * spent[k].astype(float))
    spent_total = shifted_scores[0]
    for s in shifted_scores[1:]:
        spent_total = spent_total + s
    leftover = 1.0 - spent_total
    combined = None
    weights = []
    for k in range(len(spent)):
        phi = shifted_scores[k] + leftover * residual[k].astype(float)
        weights.append(phi.data)
        term = dc.shift(mixed, k) * dc.broadcast_to(dc.reshape(phi, (T, n, 1)), (T, n, N))
        combined = term if combined is None else combined + term
    return combined, orders, np.stack(weights, axis=-1)


def effective_order_trace(model, X=None) -> np.ndarray:
    """Effective AR order per (time, series) over the in-sample latents."""
    if not getattr(model, "fitted", False):
        raise ValueError("model has not been trained")
    with dc.no_grad():
        return model.orders()


def write_trace_csv(path, orders: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "series", "order"])
        for t in range(orders.shape[0]):
            for i in range(orders.shape[1]):
                w.writerow([t, i, int(orders[t, i])])
