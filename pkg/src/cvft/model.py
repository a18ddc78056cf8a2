"""Two-branch network: per-domain encoders followed by the transport block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var, reshape
from .encoder import EncoderConfig, encode_op, init_encoder
from .errors import ValidationError
from .metric import batch_loss_op, pairwise_distance_op
from .sinkhorn import SinkhornConfig, sinkhorn_op
from .transport import cvft_op, generate_cost_op, init_cost_params, transport_op

ADAM_PREFIX = "adam."


@dataclass
class CVFTModel:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    pooling: str = "channel-mean"
    scale_mode: str = "unit"
    transport: bool = True
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, seed: int = 0, **kwargs) -> "CVFTModel":
        model = cls(**kwargs)
        rng = np.random.default_rng(seed)
        params = init_encoder(model.encoder, rng)
        if model.transport:
            h, w, c = model.encoder.feature_shape
            cost = init_cost_params(h * w, c, rng, model.pooling)
            params["cost.w"], params["cost.b"] = cost.weights, cost.bias
        model.params = params
        return model

    def _register(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.param(k, self.params[k]) for k in sorted(self.params)}

    def forward(self, tape: Tape, ground: np.ndarray, aerial: np.ndarray, pv: dict[str, Var]):
        """Embeddings ``(B, d)`` for both branches and the plan (or ``None``)."""
        fg = encode_op(tape.constant(ground), pv, "ground", self.encoder)
        fa = encode_op(tape.constant(aerial), pv, "aerial", self.encoder)
        return cvft_op(fg, fa, pv.get("cost.w"), pv.get("cost.b"), self.sinkhorn,
                       self.pooling, self.scale_mode, self.transport)

    def loss_and_grads(self, ground: np.ndarray, aerial: np.ndarray, gamma: float = 10.0):
        tape = Tape()
        pv = self._register(tape)
        g, a, _ = self.forward(tape, ground, aerial, pv)
        loss = batch_loss_op(pairwise_distance_op(g, a), gamma)
        return float(loss.value), tape.backward(loss)

    def loss(self, ground: np.ndarray, aerial: np.ndarray, gamma: float = 10.0) -> float:
        return self.loss_and_grads(ground, aerial, gamma)[0]

    def embed(self, ground: np.ndarray, aerial: np.ndarray, chunk: int = 64):
        """Inference-only embeddings for arrays of paired inputs."""
        gs, as_ = [], []
        for i in range(0, len(ground), chunk):
            tape = Tape()
            pv = {k: tape.constant(v) for k, v in self.params.items()}
            g, a, _ = self.forward(tape, ground[i:i + chunk], aerial[i:i + chunk], pv)
            gs.append(g.value)
            as_.append(a.value)
        return np.concatenate(gs), np.concatenate(as_)

    def plans(self, ground: np.ndarray) -> np.ndarray:
        """Transport plans ``(N, n, n)`` for ground inputs."""
        if not self.transport:
            raise ValidationError("model was built without the transport block")
        tape = Tape()
        pv = {k: tape.constant(v) for k, v in self.params.items()}
        fg = encode_op(tape.constant(ground), pv, "ground", self.encoder)
        C = generate_cost_op(fg, pv["cost.w"], pv["cost.b"], self.pooling)
        return sinkhorn_op(C, self.sinkhorn).value

    def transported_features(self, ground: np.ndarray) -> np.ndarray:
        """Ground feature grids after transport, ``(N, h, w, c)``."""
        tape = Tape()
        pv = {k: tape.constant(v) for k, v in self.params.items()}
        fg = encode_op(tape.constant(ground), pv, "ground", self.encoder)
        if not self.transport:
            return fg.value
        B, h, w, c = fg.shape
        C = generate_cost_op(fg, pv["cost.w"], pv["cost.b"], self.pooling)
        P = sinkhorn_op(C, self.sinkhorn)
        return transport_op(P, reshape(fg, (B, h * w, c)), self.scale_mode).value.reshape(B, h, w, c)

    def checkpoint_tensors(self, adam=None) -> dict[str, np.ndarray]:
        out = dict(self.params)
        if adam is not None:
            out[ADAM_PREFIX + "step"] = np.array([float(adam.step)])
            for k, v in adam.m.items():
                out[ADAM_PREFIX + "m." + k] = v
            for k, v in adam.v.items():
                out[ADAM_PREFIX + "v." + k] = v
        return out
