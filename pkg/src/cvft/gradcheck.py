"""Finite-difference checks for every differentiable op in the package.

Each case builds a scalar function on a fresh tape from seeded random inputs
and compares the tape gradient against central differences.  Vector-valued
ops are probed with a fixed random weighting so no gradient entry is
structurally zero.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .autodiff import (GradCheckReport, add_bias, check_tape_function, l2_normalize_rows, matmul,
                       relu, weighted_sum)
from .encoder import EncoderConfig, avg_pool_op, conv2d_op, encode_op, init_encoder
from .metric import batch_loss_op, pairwise_distance_op
from .sinkhorn import (SinkhornConfig, col_normalize_op, exp_kernel_op, row_normalize_op,
                       sinkhorn_iterations)
from .transport import cvft_op, generate_cost_op, init_cost_params, transport_op

Case = tuple[str, Callable, dict[str, np.ndarray]]

SINKHORN_SIZES = (2, 4, 8)
SINKHORN_ITERS = (1, 5, 10)


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _positive(rng, shape):
    return rng.uniform(0.2, 1.5, size=shape)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def cases(seed: int = 0) -> Iterator[Case]:
    rng = np.random.default_rng(seed)

    W = _probe(rng, (4, 4))
    yield ("exp_kernel", lambda t, v, W=W: weighted_sum(exp_kernel_op(v["C"], 1.5), W),
           {"C": rng.random((4, 4))})
    W = _probe(rng, (4, 5))
    yield ("row_normalize", lambda t, v, W=W: weighted_sum(row_normalize_op(v["M"]), W),
           {"M": _positive(rng, (4, 5))})
    W = _probe(rng, (5, 4))
    yield ("col_normalize", lambda t, v, W=W: weighted_sum(col_normalize_op(v["M"]), W),
           {"M": _positive(rng, (5, 4))})

    for n in SINKHORN_SIZES:
        for m in SINKHORN_ITERS:
            W = _probe(rng, (n, n))
            yield (f"sinkhorn_n{n}_m{m}",
                   lambda t, v, W=W, m=m: weighted_sum(sinkhorn_iterations(v["C"], 2.0, m), W),
                   {"C": rng.random((n, n))})

    W = _probe(rng, (2, 3, 4))
    yield ("matmul", lambda t, v, W=W: weighted_sum(matmul(v["a"], v["b"]), W),
           {"a": rng.standard_normal((2, 3, 5)), "b": rng.standard_normal((2, 5, 4))})

    for pooling in ("channel-mean", "full-flatten"):
        cp = init_cost_params(4, 3, rng, pooling)
        W = _probe(rng, (2, 4, 4))
        yield (f"cost_generation_{pooling}",
               lambda t, v, W=W, pooling=pooling: weighted_sum(
                   generate_cost_op(v["f"], v["w"], v["b"], pooling), W),
               {"f": rng.standard_normal((2, 2, 2, 3)), "w": cp.weights,
                "b": rng.standard_normal(16) * 0.1})

    for mode in ("unit", "n-scaled"):
        W = _probe(rng, (2, 4, 3))
        yield (f"transport_{mode}",
               lambda t, v, W=W, mode=mode: weighted_sum(transport_op(v["P"], v["F"], mode), W),
               {"P": rng.random((2, 4, 4)), "F": rng.standard_normal((2, 4, 3))})

    W = _probe(rng, (2, 3))
    yield ("affine", lambda t, v, W=W: weighted_sum(add_bias(matmul(v["x"], v["w"]), v["b"]), W),
           {"x": rng.standard_normal((2, 4)), "w": rng.standard_normal((4, 3)),
            "b": rng.standard_normal(3)})

    for stride in (1, 2):
        out = 4 // stride
        W = _probe(rng, (2, out, out, 3))
        yield (f"conv2d_stride{stride}",
               lambda t, v, W=W, stride=stride: weighted_sum(conv2d_op(v["x"], v["w"], v["b"], stride), W),
               {"x": rng.standard_normal((2, 4, 4, 2)), "w": rng.standard_normal((3, 3, 2, 3)),
                "b": rng.standard_normal(3)})
    W = _probe(rng, (2, 3, 4))
    yield ("relu", lambda t, v, W=W: weighted_sum(relu(v["x"]), W), {"x": _away_from_zero(rng, (2, 3, 4))})
    W = _probe(rng, (1, 2, 2, 3))
    yield ("avg_pool", lambda t, v, W=W: weighted_sum(avg_pool_op(v["x"], 2), W),
           {"x": rng.standard_normal((1, 4, 4, 3))})
    W = _probe(rng, (3, 5))
    yield ("l2_normalize", lambda t, v, W=W: weighted_sum(l2_normalize_rows(v["x"]), W),
           {"x": rng.standard_normal((3, 5))})
    W = _probe(rng, (3, 3))
    yield ("pairwise_distance", lambda t, v, W=W: weighted_sum(pairwise_distance_op(v["g"], v["a"]), W),
           {"g": rng.standard_normal((3, 4)), "a": rng.standard_normal((3, 4))})
    yield ("triplet_loss", lambda t, v: batch_loss_op(v["D"], 10.0),
           {"D": rng.uniform(0.2, 1.2, size=(4, 4))})

    yield end_to_end_case(rng)


def end_to_end_case(rng: np.random.Generator, batch: int = 2) -> Case:
    """Full forward (encoder, cost generation, Sinkhorn, transport, loss) on a tiny model.

    n = 4 keeps every gradient entry well above the central-difference
    round-off floor; at n = 16 a few of the 4096 cost weights have gradients
    near 1e-8 that f64 differences cannot resolve to 1e-4 relative.
    """
    enc = EncoderConfig(input_shape=(4, 4, 2), conv_channels=(3,), strides=(2,), out_channels=3)
    h, w, c = enc.feature_shape
    sk = SinkhornConfig(lam=2.0, max_iterations=5)
    params = init_encoder(enc, rng)
    cost = init_cost_params(h * w, c, rng)
    params["cost.w"], params["cost.b"] = cost.weights, rng.standard_normal(cost.bias.shape) * 0.1
    params["input.ground"] = rng.standard_normal((batch,) + enc.input_shape)
    params["input.aerial"] = rng.standard_normal((batch,) + enc.input_shape)

    def build(t, v):
        fg = encode_op(v["input.ground"], v, "ground", enc)
        fa = encode_op(v["input.aerial"], v, "aerial", enc)
        g, a, _ = cvft_op(fg, fa, v["cost.w"], v["cost.b"], sk)
        return batch_loss_op(pairwise_distance_op(g, a), 10.0)

    return ("end_to_end", build, params)


def run_suite(seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4) -> list[GradCheckReport]:
    return [check_tape_function(build, inputs, name, step, tolerance)
            for name, build, inputs in cases(seed)]
