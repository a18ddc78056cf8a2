"""Entropy-regularized transport via alternating row/column normalization.

The kernel is ``exp(-lambda * C)``, so a larger ``lambda`` concentrates the
plan on cheap cells.  Marginals are uniform: the returned plan is doubly
stochastic (rows and columns sum to one).  Gradients are obtained by unrolling
the recorded normalization steps exactly, never by implicit differentiation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .autodiff import Tape, Var
from .errors import DegenerateColumn, DegenerateRow, DomainError, ShapeMismatch
from .core import check_finite

log = logging.getLogger(__name__)

EXP_FLOOR = -700.0
DEGENERATE_SUM = 1e-300


@dataclass(frozen=True)
class SinkhornConfig:
    lam: float = 10.0
    max_iterations: int = 10
    tolerance: float = 1e-6
    mode: Literal["fixed", "tolerance"] = "fixed"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be nonnegative")
        if self.mode not in ("fixed", "tolerance"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def standalone(cls, lam: float = 10.0) -> "SinkhornConfig":
        """Defaults for one-off solves outside training."""
        return cls(lam=lam, max_iterations=500, tolerance=1e-6, mode="tolerance")


@dataclass(frozen=True, eq=False)
class TransportPlan:
    data: np.ndarray
    row_residual: float
    col_residual: float
    iterations_run: int
    converged: bool

    @property
    def n(self) -> int:
        return self.data.shape[-1]


@dataclass
class SinkhornTrace:
    """Forward intermediates needed to differentiate a solve."""

    cost: np.ndarray
    lam: float
    kernel: np.ndarray
    # inputs of each row and column normalization, in order
    steps: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)


def residuals(P: np.ndarray) -> tuple[float, float]:
    return (float(np.max(np.abs(P.sum(axis=-1) - 1.0))),
            float(np.max(np.abs(P.sum(axis=-2) - 1.0))))


# ---------------------------------------------------------------------------
# primitive forward / backward pairs on plain arrays

def exp_kernel(C, lam: float) -> np.ndarray:
    C = check_finite(np.asarray(C, dtype=np.float64), "cost matrix")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return np.exp(np.maximum(-lam * C, EXP_FLOOR))


def _exp_kernel_vjp(g, C, K, lam):
    return np.where(-lam * C > EXP_FLOOR, -lam * K * g, 0.0)


def _normalize(M: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    s = M.sum(axis=axis, keepdims=True)
    if np.any(s <= DEGENERATE_SUM):
        raise (DegenerateRow if axis == -1 else DegenerateColumn)(
            f"{'row' if axis == -1 else 'column'} sum below {DEGENERATE_SUM:g}")
    return M / s, s


def _normalize_vjp(g, out, s, axis):
    return (g - np.sum(g * out, axis=axis, keepdims=True)) / s


def row_normalize(M) -> np.ndarray:
    return _normalize(np.asarray(M, dtype=np.float64), -1)[0]


def col_normalize(M) -> np.ndarray:
    return _normalize(np.asarray(M, dtype=np.float64), -2)[0]


# ---------------------------------------------------------------------------
# solver

def _iterate(K, cfg: SinkhornConfig, on_step=None):
    P = K
    done = 0
    row_res = col_res = np.inf
    for _ in range(cfg.max_iterations):
        R, rs = _normalize(P, -1)
        P, cs = _normalize(R, -2)
        if on_step is not None:
            on_step(R, rs, P, cs)
        done += 1
        if cfg.mode == "tolerance":
            row_res, col_res = residuals(P)
            if max(row_res, col_res) <= cfg.tolerance:
                break
    if cfg.mode == "fixed":
        row_res, col_res = residuals(P)
    return P, done, row_res, col_res


def sinkhorn_forward(C, cfg: SinkhornConfig) -> tuple[TransportPlan, SinkhornTrace]:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim < 2 or C.shape[-1] != C.shape[-2]:
        raise ShapeMismatch(f"cost matrix must be square, got {C.shape}")
    K = exp_kernel(C, cfg.lam)
    trace = SinkhornTrace(C, cfg.lam, K)

    def keep(R, rs, P, cs):
        trace.steps.append(("row", R, rs))
        trace.steps.append(("col", P, cs))

    P, done, rr, cr = _iterate(K, cfg, keep)
    plan = TransportPlan(P, rr, cr, done, max(rr, cr) <= cfg.tolerance)
    return plan, trace


def sinkhorn_solve(C, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Run the normalization iterations on ``exp(-lambda C)`` and return the plan."""
    cfg = cfg or SinkhornConfig.standalone()
    C = np.asarray(C, dtype=np.float64)
    if C.ndim < 2 or C.shape[-1] != C.shape[-2]:
        raise ShapeMismatch(f"cost matrix must be square, got {C.shape}")
    P, done, rr, cr = _iterate(exp_kernel(C, cfg.lam), cfg)
    log.debug("sinkhorn: %d iterations, residuals %.3e / %.3e", done, rr, cr)
    return TransportPlan(P, rr, cr, done, max(rr, cr) <= cfg.tolerance)


def sinkhorn_vjp(trace: SinkhornTrace, upstream) -> np.ndarray:
    """Gradient with respect to the cost matrix of ``sum(upstream * plan)``."""
    g = np.asarray(upstream, dtype=np.float64)
    for kind, out, s in reversed(trace.steps):
        g = _normalize_vjp(g, out, s, -1 if kind == "row" else -2)
    return _exp_kernel_vjp(g, trace.cost, trace.kernel, trace.lam)


def ot_objective(P, C, lam: float) -> float:
    """``<P, C>_F - lam * h(P)`` with ``h(P) = -sum P (log P - 1)``."""
    P = np.asarray(getattr(P, "data", P), dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if P.shape != C.shape:
        raise ShapeMismatch(f"plan {P.shape} vs cost {C.shape}")
    if np.any(P <= 0):
        raise DomainError("entropy undefined for nonpositive plan entries")
    entropy = -np.sum(P * (np.log(P) - 1.0))
    return float(np.sum(P * C) - lam * entropy)


# ---------------------------------------------------------------------------
# tape versions

def exp_kernel_op(C: Var, lam: float) -> Var:
    c = C.value
    K = exp_kernel(c, lam)
    return C.tape.record("exp_kernel", (C,), K, lambda g: (_exp_kernel_vjp(g, c, K, lam),),
                         saved=(c, K))


def row_normalize_op(M: Var) -> Var:
    out, s = _normalize(M.value, -1)
    return M.tape.record("row_normalize", (M,), out,
                         lambda g: (_normalize_vjp(g, out, s, -1),), saved=(out, s))


def col_normalize_op(M: Var) -> Var:
    out, s = _normalize(M.value, -2)
    return M.tape.record("col_normalize", (M,), out,
                         lambda g: (_normalize_vjp(g, out, s, -2),), saved=(out, s))


def sinkhorn_op(C: Var, cfg: SinkhornConfig) -> Var:
    """Record the kernel and every normalization step on ``C``'s tape."""
    if C.value.ndim < 2 or C.shape[-1] != C.shape[-2]:
        raise ShapeMismatch(f"cost matrix must be square, got {C.shape}")
    P = exp_kernel_op(C, cfg.lam)
    for _ in range(cfg.max_iterations):
        P = col_normalize_op(row_normalize_op(P))
        if cfg.mode == "tolerance" and max(residuals(P.value)) <= cfg.tolerance:
            break
    return P


def sinkhorn_iterations(C: Var, lam: float, m: int) -> Var:
    """Exactly ``m`` iterations; ``m = 0`` returns the kernel itself."""
    P = exp_kernel_op(C, lam)
    for _ in range(m):
        P = col_normalize_op(row_normalize_op(P))
    return P


__all__ = [
    "SinkhornConfig", "TransportPlan", "SinkhornTrace", "Tape",
    "exp_kernel", "row_normalize", "col_normalize", "sinkhorn_solve", "sinkhorn_forward",
    "sinkhorn_vjp", "ot_objective", "residuals", "exp_kernel_op", "row_normalize_op",
    "col_normalize_op", "sinkhorn_op", "sinkhorn_iterations",
]
