"""Soft-margin triplet loss over exhaustive in-batch triplets, and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Var
from .errors import BatchTooSmall, NonFiniteGradient, ShapeMismatch

EXP_CLAMP = 700.0


def _softplus(z):
    return np.logaddexp(0.0, np.clip(z, -EXP_CLAMP, EXP_CLAMP))


def _sigmoid(z):
    z = np.clip(z, -EXP_CLAMP, EXP_CLAMP)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def triplet_loss(d_pos, d_neg, gamma: float = 10.0):
    """``log(1 + exp(gamma * (d_pos - d_neg)))``, elementwise."""
    return _softplus(gamma * (np.asarray(d_pos, dtype=np.float64) - d_neg))


def triplet_loss_grad(d_pos, d_neg, gamma: float = 10.0):
    """Partial derivatives ``(dL/d_pos, dL/d_neg)``."""
    s = gamma * _sigmoid(gamma * (np.asarray(d_pos, dtype=np.float64) - d_neg))
    return s, -s


class Triplet(NamedTuple):
    anchor_domain: str  # "ground" or "aerial"
    anchor: int
    positive: int
    negative: int


def exhaustive_triplets(batch_size: int) -> list[Triplet]:
    """All ``2 B (B - 1)`` in-batch triplets, ground-anchored first.

    Ordered anchor-major, negative-minor within each domain.
    """
    if batch_size < 2:
        raise BatchTooSmall(f"need at least 2 pairs per batch, got {batch_size}")
    out = []
    for domain in ("ground", "aerial"):
        for i in range(batch_size):
            out.extend(Triplet(domain, i, i, j) for j in range(batch_size) if j != i)
    return out


def pairwise_distances(g: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``D[i, j] = ||g_i - a_j||``."""
    return np.sqrt(np.sum((g[:, None, :] - a[None, :, :]) ** 2, axis=-1))


def pairwise_distance_op(g: Var, a: Var) -> Var:
    if g.value.ndim != 2 or g.shape != a.shape:
        raise ShapeMismatch(f"pairwise distances need equal (B, d) inputs, got {g.shape}, {a.shape}")
    diff = g.value[:, None, :] - a.value[None, :, :]
    D = np.sqrt(np.sum(diff ** 2, axis=-1))
    # zero distance has no gradient; use the zero subgradient there
    inv = np.divide(1.0, D, out=np.zeros_like(D), where=D > 0)

    def vjp(grad):
        w = (grad * inv)[..., None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return g.tape.record("pairwise_distance", (g, a), D, vjp)


def _batch_terms(D: np.ndarray, gamma: float):
    B = D.shape[0]
    pos = np.diag(D)
    off = ~np.eye(B, dtype=bool)
    z_ground = gamma * (pos[:, None] - D)  # anchor g_i, negative a_j
    z_aerial = gamma * (pos[:, None] - D.T)  # anchor a_i, negative g_j
    return off, z_ground, z_aerial


def batch_loss_from_distances(D: np.ndarray, gamma: float = 10.0) -> float:
    B = D.shape[0]
    if B < 2:
        raise BatchTooSmall(f"need at least 2 pairs per batch, got {B}")
    off, zg, za = _batch_terms(D, gamma)
    total = _softplus(zg)[off].sum() + _softplus(za)[off].sum()
    return float(total / (2 * B * (B - 1)))


def batch_loss_op(D: Var, gamma: float = 10.0) -> Var:
    """Mean soft-margin loss over all exhaustive triplets of a distance matrix."""
    Dv = D.value
    B = Dv.shape[0]
    if Dv.shape != (B, B):
        raise ShapeMismatch(f"distance matrix must be square, got {Dv.shape}")
    if B < 2:
        raise BatchTooSmall(f"need at least 2 pairs per batch, got {B}")
    off, zg, za = _batch_terms(Dv, gamma)
    count = 2 * B * (B - 1)
    value = (_softplus(zg)[off].sum() + _softplus(za)[off].sum()) / count

    def vjp(g):
        sg = np.where(off, gamma * _sigmoid(zg), 0.0) * (g / count)
        sa = np.where(off, gamma * _sigmoid(za), 0.0) * (g / count)
        dD = -sg - sa.T
        dD[np.diag_indices(B)] += sg.sum(axis=1) + sa.sum(axis=1)
        return (dD,)

    return D.tape.record("triplet_batch_loss", (D,), np.asarray(value), vjp)


def batch_loss(ground: np.ndarray, aerial: np.ndarray, gamma: float = 10.0) -> float:
    """Mean loss of a batch of embeddings; row ``i`` of each side is a matching pair."""
    g = np.asarray(ground, dtype=np.float64)
    a = np.asarray(aerial, dtype=np.float64)
    if g.shape != a.shape or g.ndim != 2:
        raise ShapeMismatch(f"embedding batches {g.shape} vs {a.shape}")
    return batch_loss_from_distances(pairwise_distances(g, a), gamma)


# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter and state objects.

    Raises NonFiniteGradient, without touching anything, if any gradient
    holds NaN or Inf.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)
