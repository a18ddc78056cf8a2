"""Small convolutional encoder standing in for a pretrained backbone.

Each branch is a stack of 3x3 convolutions with ReLU followed by a 1x1
channel-reduction convolution and an optional average pool.  Ground and aerial
branches have separate weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var, relu
from .core import FeatureGrid, check_finite
from .errors import FormatError, ShapeMismatch, ValidationError

BRANCHES = ("ground", "aerial")


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (32, 32, 3)
    conv_channels: tuple[int, ...] = (8, 16)
    strides: tuple[int, ...] = (2, 2)
    kernel: int = 3
    out_channels: int = 16
    pool: int = 1
    reduction_relu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        if len(self.conv_channels) != len(self.strides):
            raise ValidationError("conv_channels and strides must have equal length")
        h, w, _ = self.input_shape
        down = int(np.prod(self.strides, dtype=int)) * self.pool
        if h % down or w % down:
            raise ValidationError(f"input {h}x{w} not divisible by total downsampling {down}")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.input_shape
        down = int(np.prod(self.strides, dtype=int)) * self.pool
        return h // down, w // down, self.out_channels

    @property
    def embedding_dim(self) -> int:
        return int(np.prod(self.feature_shape))


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-scaled uniform weights and zero biases for both branches."""
    params = {}
    k = cfg.kernel
    for branch in BRANCHES:
        cin = cfg.input_shape[2]
        for i, cout in enumerate(cfg.conv_channels):
            params[f"{branch}.conv{i}.w"] = _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout)
            params[f"{branch}.conv{i}.b"] = np.zeros(cout)
            cin = cout
        params[f"{branch}.reduce.w"] = _glorot(rng, (1, 1, cin, cfg.out_channels), cin, cfg.out_channels)
        params[f"{branch}.reduce.b"] = np.zeros(cfg.out_channels)
    return params


def conv2d_op(x: Var, w: Var, b: Var, stride: int = 1) -> Var:
    """Zero-padded 'same'-style convolution on ``(B, H, W, Cin)`` inputs."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or wv.shape[2] != xv.shape[3] or wv.shape[0] != wv.shape[1]:
        raise ShapeMismatch(f"conv2d: input {xv.shape}, weights {wv.shape}")
    k, cout = wv.shape[0], wv.shape[3]
    if b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias {b.shape} for {cout} output channels")
    p = k // 2
    B, H, W, cin = xv.shape
    Ho, Wo = (H + 2 * p - k) // stride + 1, (W + 2 * p - k) // stride + 1
    xp = np.pad(xv, ((0, 0), (p, p), (p, p), (0, 0)))

    def window(ki, kj):
        return (slice(None), slice(ki, ki + stride * (Ho - 1) + 1, stride),
                slice(kj, kj + stride * (Wo - 1) + 1, stride))

    out = np.zeros((B, Ho, Wo, cout))
    for ki in range(k):
        for kj in range(k):
            out += xp[window(ki, kj)] @ wv[ki, kj]
    out += b.value

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wv)
        g2 = g.reshape(-1, cout)
        for ki in range(k):
            for kj in range(k):
                sl = window(ki, kj)
                gw[ki, kj] = xp[sl].reshape(-1, cin).T @ g2
                gxp[sl] += g @ wv[ki, kj].T
        return gxp[:, p:p + H, p:p + W, :], gw, g.sum(axis=(0, 1, 2))

    return x.tape.record("conv2d", (x, w, b), out, vjp)


def avg_pool_op(x: Var, factor: int) -> Var:
    if factor == 1:
        return x
    B, H, W, C = x.shape
    if H % factor or W % factor:
        raise ShapeMismatch(f"avg_pool: {H}x{W} not divisible by {factor}")
    out = x.value.reshape(B, H // factor, factor, W // factor, factor, C).mean(axis=(2, 4))

    def vjp(g):
        up = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        return (up / factor ** 2,)

    return x.tape.record("avg_pool", (x,), out, vjp)


def encode_op(x: Var, params: dict[str, Var], branch: str, cfg: EncoderConfig) -> Var:
    """Batched encoder on the tape: ``(B, H, W, Cin) -> (B, h, w, c)``."""
    if branch not in BRANCHES:
        raise ValidationError(f"unknown branch {branch!r}")
    if x.shape[1:] != cfg.input_shape:
        raise ShapeMismatch(f"encoder expects inputs {cfg.input_shape}, got {x.shape[1:]}")
    h = x
    for i, s in enumerate(cfg.strides):
        h = relu(conv2d_op(h, params[f"{branch}.conv{i}.w"], params[f"{branch}.conv{i}.b"], s))
    h = conv2d_op(h, params[f"{branch}.reduce.w"], params[f"{branch}.reduce.b"], 1)
    if cfg.reduction_relu:
        h = relu(h)
    return avg_pool_op(h, cfg.pool)


def encode(grid: FeatureGrid | np.ndarray, params: dict[str, np.ndarray], branch: str,
           cfg: EncoderConfig) -> FeatureGrid:
    tape = Tape()
    data = grid.data if isinstance(grid, FeatureGrid) else np.asarray(grid, dtype=np.float64)
    pv = {k: tape.constant(v) for k, v in params.items() if k.startswith(branch + ".")}
    out = encode_op(tape.constant(data[None]), pv, branch, cfg)
    return FeatureGrid(out.value[0])


def encode_batch(inputs: np.ndarray, params: dict[str, np.ndarray], branch: str,
                 cfg: EncoderConfig) -> np.ndarray:
    tape = Tape()
    pv = {k: tape.constant(v) for k, v in params.items() if k.startswith(branch + ".")}
    return encode_op(tape.constant(inputs), pv, branch, cfg).value


def load_precomputed(path) -> FeatureGrid:
    """Load an ``h x w x c`` grid exported from elsewhere as a tensor file."""
    from .data_io import load_tensor

    a = load_tensor(path)
    if a.ndim != 3:
        raise FormatError(f"{path}: expected 3 dims, found {a.ndim}")
    check_finite(a, str(path))
    return FeatureGrid(a)
