"""A minimal reverse-mode tape.

Every differentiable op appends a :class:`TapeNode` holding a closure over the
forward values it needs; :func:`backward` walks the tape in reverse and
accumulates vector-Jacobian products.  Only the handful of ops this package
needs are provided.  Arrays may carry leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import ZERO_NORM
from .errors import NonFiniteValue, ShapeMismatch, ZeroVector

VJP = Callable[[np.ndarray], Sequence[np.ndarray]]


@dataclass
class TapeNode:
    op_id: str
    inputs: tuple[int, ...]
    output_shape: tuple[int, ...]
    vjp: VJP | None = None
    saved_inputs: tuple = ()


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var({self.tape.nodes[self.index].op_id}, shape={self.shape})"


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)

    def _push(self, node: TapeNode, value: np.ndarray) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, value)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        value = np.asarray(value, dtype=np.float64)
        v = self._push(TapeNode("param", (), value.shape), value)
        self.params[name] = v.index
        return v

    def constant(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return self._push(TapeNode("const", (), value.shape), value)

    def record(self, op_id: str, inputs: Sequence[Var], value: np.ndarray, vjp: VJP,
               saved: tuple = ()) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{op_id}: input recorded on a different tape")
        node = TapeNode(op_id, tuple(v.index for v in inputs), value.shape, vjp, saved)
        return self._push(node, value)

    def backward(self, loss: Var, seed: float = 1.0) -> dict[str, np.ndarray]:
        return backward(self, loss, seed)


def backward(tape: Tape, loss: Var, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Gradient of ``seed * loss`` with respect to every registered parameter.

    Parameters the loss does not depend on get exact zeros.
    """
    if loss.value.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {
        loss.index: np.full(tape.nodes[loss.index].output_shape, float(seed))
    }
    for idx in range(loss.index, -1, -1):
        g = grads.pop(idx, None)
        node = tape.nodes[idx]
        if g is None or node.vjp is None:
            if g is not None:
                grads[idx] = g  # leaf: keep for parameter lookup
            continue
        if g.shape != node.output_shape:
            raise ShapeMismatch(
                f"{node.op_id}: upstream gradient {g.shape} != output {node.output_shape}"
            )
        in_grads = node.vjp(g)
        if len(in_grads) != len(node.inputs):
            raise ShapeMismatch(f"{node.op_id}: vjp returned {len(in_grads)} gradients "
                                f"for {len(node.inputs)} inputs")
        for j, gj in zip(node.inputs, in_grads):
            want = tape.nodes[j].output_shape
            if gj.shape != want:
                raise ShapeMismatch(f"{node.op_id}: gradient {gj.shape} for input of shape {want}")
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return {
        name: grads.get(i, np.zeros(tape.nodes[i].output_shape))
        for name, i in tape.params.items()
    }


# ---------------------------------------------------------------------------
# generic ops

def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return a.tape.record("add", (a, b), a.value + b.value, lambda g: (g, g))


def scale(a: Var, s: float) -> Var:
    s = float(s)
    return a.tape.record("scale", (a,), s * a.value, lambda g: (s * g,))


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def mean(a: Var, axis: int | None = None) -> Var:
    x = a.value
    if axis is None:
        n = x.size
        return a.tape.record("mean", (a,), np.asarray(x.mean()),
                             lambda g: (np.full(x.shape, g / n),))
    n = x.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return a.tape.record("mean", (a,), x.mean(axis=axis), vjp)


def matmul(a: Var, b: Var) -> Var:
    """``a @ b`` over the last two axes; leading axes must agree unless ``b`` is 2-D."""
    x, y = a.value, b.value
    if x.shape[-1] != y.shape[-2] or (y.ndim > 2 and x.shape[:-2] != y.shape[:-2]):
        raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}")

    def vjp(g):
        gx = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2:
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = np.swapaxes(x, -1, -2) @ g
        return gx, gy

    return a.tape.record("matmul", (a, b), x @ y, vjp, saved=(x, y))


def add_bias(a: Var, b: Var) -> Var:
    """Add a vector along the last axis."""
    if b.value.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: {a.shape} + {b.shape}")
    lead = tuple(range(a.value.ndim - 1))
    return a.tape.record("add_bias", (a, b), a.value + b.value,
                         lambda g: (g, g.sum(axis=lead)))


def weighted_sum(a: Var, weights) -> Var:
    """``sum(weights * a)`` for a constant weight array; a scalar probe of ``a``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeMismatch(f"weighted_sum: weights {w.shape} vs {a.shape}")
    return a.tape.record("weighted_sum", (a,), np.asarray(np.sum(w * a.value)), lambda g: (g * w,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def l2_normalize_rows(a: Var) -> Var:
    """Normalize each vector along the last axis to unit L2 norm."""
    x = a.value
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm <= ZERO_NORM):
        raise ZeroVector("cannot normalize an all-zero embedding")
    y = x / norm

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return a.tape.record("l2_normalize", (a,), y, vjp)


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class GradCheckReport:
    op_id: str
    max_relative_error: float
    tolerance: float
    passed: bool
    perturbation_step: float

    def csv_row(self) -> str:
        return f"{self.op_id},{self.max_relative_error:.6e},{self.tolerance:g},{str(self.passed).lower()}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_gradient(f: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64, copy=True)
    out = np.empty_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteValue(f"function not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return out


def finite_difference_check(f: Callable[[np.ndarray], float], grad, point, step: float = 1e-5,
                            tolerance: float = 1e-4, op_id: str = "f") -> GradCheckReport:
    """Compare an analytic gradient against central differences of ``f`` at ``point``.

    ``grad`` is either the analytic gradient array or a callable returning it.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(grad(point) if callable(grad) else grad, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeMismatch(f"analytic gradient {analytic.shape} vs point {point.shape}")
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteValue(f"{op_id}: analytic gradient not finite")
    numeric = numeric_gradient(f, point, step)
    err = relative_error(analytic, numeric)
    return GradCheckReport(op_id, err, tolerance, err <= tolerance, step)


def check_tape_function(build: Callable[[Tape, dict[str, Var]], Var],
                        inputs: dict[str, np.ndarray], op_id: str,
                        step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Gradcheck a scalar function built on a tape over all of ``inputs`` jointly."""
    names = list(inputs)
    shapes = [np.shape(inputs[k]) for k in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def unpack(vec):
        out, at = {}, 0
        for k, s, n in zip(names, shapes, sizes):
            out[k] = vec[at:at + n].reshape(s)
            at += n
        return out

    def run(vec):
        tape = Tape()
        vars_ = {k: tape.param(k, v) for k, v in unpack(vec).items()}
        return tape, build(tape, vars_)

    def f(vec):
        return float(run(vec)[1].value)

    def grad(vec):
        tape, loss = run(vec)
        g = tape.backward(loss)
        return np.concatenate([g[k].ravel() for k in names])

    x0 = np.concatenate([np.asarray(inputs[k], dtype=np.float64).ravel() for k in names])
    return finite_difference_check(f, grad, x0, step, tolerance, op_id)
