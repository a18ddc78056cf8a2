"""The feature transport block.

A learned affine map turns pooled ground features into an ``n x n`` cost
matrix, the Sinkhorn layer turns that into a doubly stochastic plan, and the
plan rearranges the ground feature cells into the aerial layout.  The cost is
computed from the ground image alone; the aerial side only enters through the
training loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .autodiff import Tape, Var, add_bias, l2_normalize_rows, matmul, mean, reshape, scale
from .core import EmbeddingVector, FeatureGrid, FlatFeatures, flatten
from .errors import ShapeMismatch, ValidationError
from .sinkhorn import SinkhornConfig, TransportPlan, residuals, sinkhorn_op

Pooling = Literal["channel-mean", "full-flatten"]
ScaleMode = Literal["unit", "n-scaled"]


@dataclass(frozen=True, eq=False)
class CostGenParams:
    weights: np.ndarray  # (pooled_dim, n * n)
    bias: np.ndarray  # (n * n,)
    pooling: Pooling = "channel-mean"

    @property
    def n(self) -> int:
        return int(round(np.sqrt(self.bias.shape[0])))

    def __post_init__(self):
        n = self.n
        if n * n != self.bias.shape[0] or self.weights.shape[1] != n * n:
            raise ShapeMismatch("cost generator output does not reshape to n x n")
        if self.pooling not in ("channel-mean", "full-flatten"):
            raise ValidationError(f"unknown pooling {self.pooling!r}")


def pooled_dim(n: int, channels: int, pooling: Pooling) -> int:
    return n if pooling == "channel-mean" else n * channels


def init_cost_params(n: int, channels: int, rng: np.random.Generator,
                     pooling: Pooling = "channel-mean") -> CostGenParams:
    fan_in, fan_out = pooled_dim(n, channels, pooling), n * n
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return CostGenParams(rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out), pooling)


def generate_cost_op(ground: Var, weights: Var, bias: Var, pooling: Pooling) -> Var:
    """``(B, h, w, c)`` ground features to ``(B, n, n)`` costs."""
    B, h, w, c = ground.shape
    n = h * w
    if weights.shape != (pooled_dim(n, c, pooling), n * n):
        raise ShapeMismatch(f"cost weights {weights.shape} do not fit a {h}x{w}x{c} grid")
    if pooling == "channel-mean":
        pooled = mean(reshape(ground, (B, n, c)), axis=-1)
    else:
        pooled = reshape(ground, (B, n * c))
    return reshape(add_bias(matmul(pooled, weights), bias), (B, n, n))


def generate_cost(ground: FeatureGrid, params: CostGenParams) -> np.ndarray:
    tape = Tape()
    C = generate_cost_op(tape.constant(ground.data[None]), tape.constant(params.weights),
                         tape.constant(params.bias), params.pooling)
    return C.value[0]


def transport_op(plan: Var, feats: Var, scale_mode: ScaleMode = "unit") -> Var:
    """``s * P @ F`` with ``F`` of shape ``(B, n, c)``; ``s`` is ``n`` in n-scaled mode."""
    if plan.shape[-1] != feats.shape[-2] or plan.shape[-2] != plan.shape[-1]:
        raise ShapeMismatch(f"plan {plan.shape} cannot transport features {feats.shape}")
    out = matmul(plan, feats)
    if scale_mode == "n-scaled":
        out = scale(out, plan.shape[-2])
    elif scale_mode != "unit":
        raise ValidationError(f"unknown scale mode {scale_mode!r}")
    return out


@dataclass(frozen=True, eq=False)
class TransportedFeatures:
    plan: TransportPlan
    features: FlatFeatures
    scale_mode: ScaleMode


def transport_features(ground: FlatFeatures, plan: TransportPlan | np.ndarray,
                       scale_mode: ScaleMode = "unit") -> TransportedFeatures:
    if not isinstance(plan, TransportPlan):
        P = np.asarray(plan, dtype=np.float64)
        rr, cr = residuals(P)
        plan = TransportPlan(P, rr, cr, 0, False)
    if plan.data.shape != (ground.n, ground.n):
        raise ShapeMismatch(f"plan {plan.data.shape} for {ground.n} cells")
    tape = Tape()
    out = transport_op(tape.constant(plan.data), tape.constant(ground.data), scale_mode)
    return TransportedFeatures(plan, FlatFeatures(out.value, ground.height, ground.width), scale_mode)


def cvft_op(ground: Var, aerial: Var, weights: Var, bias: Var, cfg: SinkhornConfig,
            pooling: Pooling = "channel-mean", scale_mode: ScaleMode = "unit",
            transport: bool = True) -> tuple[Var, Var, Var | None]:
    """Batched block on the tape.

    Returns unit-norm ground and aerial embeddings ``(B, n*c)`` and the plan
    ``(B, n, n)``.  With ``transport=False`` the ground features skip the
    block (identity transport) and the plan is ``None``.
    """
    if ground.shape != aerial.shape:
        raise ShapeMismatch(f"ground {ground.shape} vs aerial {aerial.shape}")
    B, h, w, c = ground.shape
    plan = None
    g = reshape(ground, (B, h * w, c))
    if transport:
        plan = sinkhorn_op(generate_cost_op(ground, weights, bias, pooling), cfg)
        g = transport_op(plan, g, scale_mode)
    g_emb = l2_normalize_rows(reshape(g, (B, h * w * c)))
    a_emb = l2_normalize_rows(reshape(aerial, (B, h * w * c)))
    return g_emb, a_emb, plan


def cvft_forward(ground: FeatureGrid, aerial: FeatureGrid, params: CostGenParams,
                 sinkhorn_cfg: SinkhornConfig | None = None, scale_mode: ScaleMode = "unit",
                 ) -> tuple[EmbeddingVector, EmbeddingVector, TransportPlan]:
    cfg = sinkhorn_cfg or SinkhornConfig()
    if ground.shape != aerial.shape:
        raise ShapeMismatch(f"ground {ground.shape} vs aerial {aerial.shape}")
    tape = Tape()
    g, a, P = cvft_op(tape.constant(ground.data[None]), tape.constant(aerial.data[None]),
                      tape.constant(params.weights), tape.constant(params.bias), cfg,
                      params.pooling, scale_mode)
    p = P.value[0]
    rr, cr = residuals(p)
    its = sum(nd.op_id == "col_normalize" for nd in tape.nodes)
    plan = TransportPlan(p, rr, cr, its, max(rr, cr) <= cfg.tolerance)
    return (EmbeddingVector(g.value[0], True), EmbeddingVector(a.value[0], True), plan)


def cvft_forward_plan(ground: FeatureGrid, aerial: FeatureGrid, plan: np.ndarray,
                      scale_mode: ScaleMode = "unit") -> tuple[EmbeddingVector, EmbeddingVector]:
    """Embeddings for an externally supplied plan, bypassing cost generation."""
    from .core import l2_normalize

    moved = transport_features(flatten(ground), plan, scale_mode).features
    return l2_normalize(moved.data.ravel()), l2_normalize(aerial.data.ravel())
