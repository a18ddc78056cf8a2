"""Run configuration, the training loop, and model-level evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import degrees_to_columns
from .data_io import DatasetManifest, load_checkpoint, save_checkpoint
from .encoder import EncoderConfig
from .errors import BatchTooSmall, CVFTError, ValidationError
from .metric import AdamState, adam_step
from .model import ADAM_PREFIX, CVFTModel
from .retrieval import DEFAULT_KS, GalleryIndex, RecallReport, evaluate_embeddings
from .sinkhorn import SinkhornConfig

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,loss,r1,r5,r10"
CHECKPOINT_NAME = "checkpoint.cvft"
CONFIG_NAME = "run_config.json"
METRICS_NAME = "metrics.csv"


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 10.0
    learning_rate: float = 1e-5
    batch_size: int = 12
    epochs: int = 50
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # random yaw applied to training panoramas, degrees; 0 disables
    shift_augment_degrees: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")
        if self.batch_size < 2:
            raise ValidationError("batch_size ≥ 2 required")
        if self.epochs < 0:
            raise ValidationError("epochs must be nonnegative")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0 <= self.shift_augment_degrees <= 180:
            raise ValidationError("shift_augment_degrees must lie in [0, 180]")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pooling: str = "channel-mean"
    scale_mode: str = "unit"
    transport: bool = True
    dataset: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                train=TrainConfig(**d.pop("train", {})),
                sinkhorn=SinkhornConfig(**d.pop("sinkhorn", {})),
                encoder=EncoderConfig(**d.pop("encoder", {})),
                **d,
            )
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, CVFTError):
                raise
            raise ValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc

    def build_model(self) -> CVFTModel:
        return CVFTModel.initialize(self.train.seed, encoder=self.encoder, sinkhorn=self.sinkhorn,
                                    pooling=self.pooling, scale_mode=self.scale_mode,
                                    transport=self.transport)


def load_model(checkpoint, cfg: RunConfig) -> tuple[CVFTModel, AdamState]:
    tensors = load_checkpoint(checkpoint)
    model = cfg.build_model()
    missing = set(model.params) - set(tensors)
    if missing:
        raise ValidationError(f"checkpoint lacks tensors {sorted(missing)[:3]}")
    for k in model.params:
        if tensors[k].shape != model.params[k].shape:
            raise ValidationError(f"checkpoint tensor {k} has shape {tensors[k].shape}, "
                                  f"config expects {model.params[k].shape}")
        model.params[k] = tensors[k]
    state = AdamState()
    if ADAM_PREFIX + "step" in tensors:
        state.step = int(tensors[ADAM_PREFIX + "step"][0])
        for k in model.params:
            if ADAM_PREFIX + "m." + k in tensors:
                state.m[k] = tensors[ADAM_PREFIX + "m." + k]
                state.v[k] = tensors[ADAM_PREFIX + "v." + k]
    return model, state


@dataclass
class TrainResult:
    model: CVFTModel
    history: list[dict]
    adam: AdamState


def _format_row(row: dict) -> str:
    return f"{row['epoch']},{row['loss']:.10g},{row['r1']:.10g},{row['r5']:.10g},{row['r10']:.10g}"


def evaluate_model(model: CVFTModel, ground: np.ndarray, aerial: np.ndarray, ks=DEFAULT_KS,
                   tags=None, d_meters: float = 25.0) -> RecallReport:
    g, a = model.embed(ground, aerial)
    gallery = GalleryIndex(a, tags)
    return evaluate_embeddings(g, gallery, ks, tags, d_meters)


def train(manifest: DatasetManifest, cfg: RunConfig, out_dir=None, val_split: str = "val",
          ) -> TrainResult:
    """Train with exhaustive in-batch triplets and Adam.

    Writes ``metrics.csv``, ``checkpoint.cvft`` (after initialization and after
    every epoch) and the resolved ``run_config.json`` into ``out_dir`` when
    given.
    """
    tc = cfg.train
    ground, aerial, _ = manifest.load_arrays("train")
    if len(ground) < tc.batch_size:
        raise BatchTooSmall(f"{len(ground)} training pairs for batch size {tc.batch_size}")
    val = manifest.load_arrays(val_split) if manifest.select(val_split) else None
    model = cfg.build_model()
    adam = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(cfg.to_json())
        (out / METRICS_NAME).write_text(METRICS_HEADER + "\n")
        save_checkpoint(out / CHECKPOINT_NAME, model.checkpoint_tensors(adam))

    shuffle = np.random.default_rng([tc.seed, 2])
    augment = np.random.default_rng([tc.seed, 4])
    history = []
    for epoch in range(1, tc.epochs + 1):
        order = shuffle.permutation(len(ground))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            idx = np.sort(order[start:start + tc.batch_size])
            if len(idx) < 2:
                continue
            try:
                g_batch = ground[idx]
                if tc.shift_augment_degrees > 0:
                    deg = augment.uniform(-tc.shift_augment_degrees, tc.shift_augment_degrees,
                                          size=len(idx))
                    g_batch = np.stack([np.roll(x, degrees_to_columns(d, x.shape[1]), axis=1)
                                        for x, d in zip(g_batch, deg)])
                loss, grads = model.loss_and_grads(g_batch, aerial[idx], tc.gamma)
                model.params, adam = adam_step(model.params, grads, adam, tc.learning_rate,
                                               tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
            except CVFTError as exc:
                raise type(exc)(f"epoch {epoch}, samples {idx.tolist()}: {exc}") from exc
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "r1": float("nan"),
               "r5": float("nan"), "r10": float("nan")}
        if val is not None:
            rep = evaluate_model(model, val[0], val[1])
            row.update(r1=rep.r_at[1], r5=rep.r_at[5], r10=rep.r_at[10])
        history.append(row)
        log.info("epoch %d loss %.5f r@1 %.3f", epoch, row["loss"], row["r1"])
        if out is not None:
            with open(out / METRICS_NAME, "a") as fh:
                fh.write(_format_row(row) + "\n")
            save_checkpoint(out / CHECKPOINT_NAME, model.checkpoint_tensors(adam))
    return TrainResult(model, history, adam)


def orientation_offsets(count: int, max_degrees: float, width: int, seed: int = 0) -> np.ndarray:
    """Per-query column shifts for yaw noise drawn uniformly in ``[-max, max]`` degrees."""
    deg = np.random.default_rng([seed, 3]).uniform(-max_degrees, max_degrees, size=count)
    return np.array([degrees_to_columns(d, width) for d in deg], dtype=np.int64)


def orientation_sweep(model: CVFTModel, ground: np.ndarray, aerial: np.ndarray,
                      max_offsets=(0.0, 20.0), ks=DEFAULT_KS, seed: int = 0, tags=None,
                      d_meters: float = 25.0) -> dict[float, RecallReport]:
    """Recall with each query panorama rotated by a random yaw before encoding.

    Shifts are applied to the input grids (column axis 2 of ``(N, H, W, C)``).
    """
    _, a_emb = model.embed(ground, aerial)
    gallery = GalleryIndex(a_emb, tags)
    out = {}
    for mx in max_offsets:
        shifts = orientation_offsets(len(ground), mx, ground.shape[2], seed)
        shifted = np.stack([np.roll(x, s, axis=1) for x, s in zip(ground, shifts)])
        g, _ = model.embed(shifted, aerial)
        rep = evaluate_embeddings(g, gallery, ks, tags, d_meters)
        rep.extra["shifts"] = shifts
        out[float(mx)] = rep
    return out
