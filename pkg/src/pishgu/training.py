"""Loss, Adam, the per-frame training loop and the evaluation driver."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import DatasetSpec, FrameSample
from .errors import ConfigError, ContractError, NonFiniteGradientError
from .metrics import MetricReport, report
from .model import ModelConfig, ModelParams, forward, parameter_count
from .numerics import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    gradient_clip: float | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name}: must lie in [0, 1), got {getattr(self, name)}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon: must be > 0, got {self.epsilon}")
        if self.gradient_clip is not None and not self.gradient_clip > 0:
            raise ConfigError(f"gradient_clip: must be > 0, got {self.gradient_clip}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every: must be >= 1, got {self.eval_every}")


TRAIN_PRESETS = {
    "vehicle": TrainConfig(epochs=40, learning_rate=0.01),
    "pedestrian_birdseye": TrainConfig(epochs=80, learning_rate=0.01),
    # unstated for the high-angle corpus; same family as bird's-eye pedestrians
    "pedestrian_highangle": TrainConfig(epochs=80, learning_rate=0.01),
}
TRAIN_PRESETS["pedestrian"] = TRAIN_PRESETS["pedestrian_birdseye"]


def loss(pred, truth) -> Tensor:
    """Mean squared error over every scalar coordinate."""
    pred = nx._as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return nx.mean(nx.square(nx.sub(pred, truth)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params},
            {k: np.zeros_like(p.data) for k, p in params},
        )


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def adam_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    if cfg.gradient_clip is not None:
        grads = clip_by_global_norm(grads, cfg.gradient_clip)
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    return params, state


def frame_loss(frame: FrameSample, params: ModelParams) -> float:
    return loss(forward(frame, params), frame.future).item()


def train_step(frame: FrameSample, params: ModelParams, state: AdamState, cfg: TrainConfig) -> float:
    with Tape() as tape:
        value = loss(forward(frame, params), frame.future)
    found = tape.backward(value)
    grads = {name: found[p] for name, p in params if p in found}
    adam_step(params, grads, state, cfg)
    return value.item()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None = None


def _check_frames(frames: Sequence[FrameSample], cfg: ModelConfig) -> None:
    for f in frames:
        if f.observed.shape[1:] != (cfg.t_in, 2) or f.future.shape[1:] != (cfg.t_out, 2):
            raise ContractError(
                f"frame {f.anchor_frame}: windows are T_in={f.observed.shape[1]}, T_out={f.future.shape[1]}; "
                f"model expects T_in={cfg.t_in}, T_out={cfg.t_out}"
            )


def train(
    dataset: Sequence[FrameSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    val: Sequence[FrameSample] = (),
    params: ModelParams | None = None,
    on_epoch: Callable[[EpochRecord, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Adam over frame graphs, one step per frame, frames shuffled each epoch.

    Returns the final parameters and one :class:`EpochRecord` per epoch; the
    recorded train loss is the mean pre-update loss over the epoch's frames.
    """
    dataset = [f for f in dataset if len(f)]
    if not dataset:
        raise ConfigError("dataset: no non-empty frames to train on")
    _check_frames(dataset, model_cfg)
    _check_frames(val, model_cfg)
    if params is None:
        params = ModelParams.init(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    state = AdamState.zeros(params)
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = [train_step(dataset[i], params, state, train_cfg) for i in order]
        record = EpochRecord(epoch, float(np.mean(losses)))
        if val and (epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs):
            record.val_loss = float(np.mean([frame_loss(f, params) for f in val]))
        history.append(record)
        logger.info("epoch %d train %.6g val %s", epoch, record.train_loss, record.val_loss)
        if on_epoch is not None:
            on_epoch(record, params)
    return params, history


def write_training_log(history: Sequence[EpochRecord], path) -> None:
    lines = ["epoch,train_loss,val_loss"]
    for r in history:
        val = "" if r.val_loss is None else repr(r.val_loss)
        lines.append(f"{r.epoch},{r.train_loss!r},{val}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def collect_predictions(frames: Sequence[FrameSample], params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Stacked absolute (denormalized) truth and prediction, ``N x T_out x 2``."""
    truths, preds = [], []
    for f in frames:
        if not len(f):
            continue
        preds.append(forward(f, params).data + f.normalization_offset)
        truths.append(f.future + f.normalization_offset)
    return np.concatenate(truths), np.concatenate(preds)


def evaluate(frames: Sequence[FrameSample], params: ModelParams, spec: DatasetSpec) -> MetricReport:
    cfg = params.config
    if (spec.t_in, spec.t_out) != (cfg.t_in, cfg.t_out):
        raise ContractError(
            f"dataset windows T_in={spec.t_in}, T_out={spec.t_out} do not match model T_in={cfg.t_in}, T_out={cfg.t_out}"
        )
    _check_frames(frames, cfg)
    if not any(len(f) for f in frames):
        raise ContractError("no subjects to evaluate")
    truth, pred = collect_predictions(frames, params)
    out = report(truth, pred, fps=spec.target_fps, units=spec.units)
    out.parameter_count = parameter_count(params)
    return out


def baseline_report(frames: Sequence[FrameSample], spec: DatasetSpec, predictor) -> MetricReport:
    """Metrics for a closed-form per-window predictor on the same frames."""
    truth, pred = [], []
    for f in frames:
        for w in f.denormalized():
            truth.append(w.future)
            pred.append(predictor(w))
    return report(np.stack(truth), np.stack(pred), fps=spec.target_fps, units=spec.units)
