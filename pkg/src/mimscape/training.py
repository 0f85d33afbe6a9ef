"""Training loops: supervised from scratch, MAE, RC-MAE and linear probing."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .dataio import Checkpoint, Dataset
from .model import ViTModel, head_logits, patchify_batch, pooled_features
from .objectives import (
    EmaTeacher,
    ce_batch_losses,
    cross_entropy,
    cross_entropy_batch,
    ema_update,
    mae_batch_losses,
    normalize_patches,
    predict_patches,
    rcmae_batch_losses,
    sample_mask_batch,
)
from .params import ParameterSet
from .rng import stream
from .tensor import ContractError, Tape

log = logging.getLogger(__name__)

REGIMES = ("supervised", "mae", "rcmae", "probe")

__all__ = [
    "REGIMES",
    "TrainConfig",
    "TrainingError",
    "OptimizerState",
    "adamw_step",
    "trainable_names",
    "train",
    "linear_probe",
    "probe_accuracy",
    "cross_entropy",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "mae"
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    seed: int = 0
    mask_ratio: float = 0.75
    ema_decay: float = 0.996
    consistency_weight: float = 1.0
    norm_pix: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ContractError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class OptimizerState:
    m: ParameterSet
    v: ParameterSet
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        p = ParameterSet(params)
        return cls(p.zeros_like(), p.zeros_like(), 0)


def adamw_step(params: ParameterSet, grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float, wd: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> tuple[ParameterSet, OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay.

    Only the names present in ``grads`` are updated; other parameters are
    passed through untouched (frozen).
    """
    b1, b2 = betas
    for name, g in grads.items():
        if name not in params or name not in state.m:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ContractError(f"{name}: gradient shape {np.shape(g)} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_params, new_m, new_v = ParameterSet(params), ParameterSet(state.m), ParameterSet(state.v)
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        p = params[name]
        if wd:
            p = p - lr * wd * p
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, step)


def trainable_names(model: ViTModel, regime: str) -> list[str]:
    if regime == "supervised":
        return model.names("encoder", "head")
    if regime in ("mae", "rcmae"):
        return model.names("encoder", "decoder")
    if regime == "probe":
        return model.names("head")
    raise ContractError(f"unknown regime {regime!r}")


def _targets(patches: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    return normalize_patches(patches) if cfg.norm_pix else patches


def train(model: ViTModel, data: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Run ``cfg.epochs`` of the chosen regime; returns the final checkpoint.

    The per-epoch loss history and (for RC-MAE) the final EMA teacher are
    carried in the checkpoint.
    """
    if cfg.regime == "probe":
        raise ContractError("use linear_probe for the probe regime")
    config = model.config
    patches = patchify_batch(data.images, config)
    targets = _targets(patches, cfg)
    labels = data.labels
    names = trainable_names(model, cfg.regime)
    params = model.params.copy()
    state = OptimizerState.zeros(params.subset(names))
    teacher = EmaTeacher.from_student(params, cfg.ema_decay) if cfg.regime == "rcmae" else None
    order_rng = stream(cfg.seed, "order")
    mask_rng = stream(cfg.seed, "mask")
    n = len(data)
    history: list[float] = []

    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        step_losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            x, y = patches[idx], targets[idx]
            if cfg.regime != "supervised":
                masked, visible = sample_mask_batch(len(idx), config.num_patches, cfg.mask_ratio, mask_rng)
            teacher_preds = None
            if teacher is not None and cfg.consistency_weight != 0.0:
                teacher_preds = predict_patches(teacher.params, config, x, masked, visible)
            with Tape() as tape:
                p = tape.watch(params, names)
                if cfg.regime == "supervised":
                    per = ce_batch_losses(p, config, x, labels[idx])
                elif cfg.regime == "mae":
                    per = mae_batch_losses(p, config, x, y, masked, visible)
                else:
                    per = rcmae_batch_losses(p, config, x, y, masked, visible, teacher_preds, cfg.consistency_weight)
                loss = T.mean(per)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            grads = tape.backward(loss)
            try:
                params, state = adamw_step(params, grads, state, cfg.learning_rate, cfg.weight_decay, cfg.betas, cfg.eps)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch + 1}, step {step + 1}: {exc}") from None
            if teacher is not None:
                teacher = ema_update(teacher, params)
            step_losses.append(value)
        history.append(float(np.mean(step_losses)))
        log.info("%s epoch %d/%d loss %.6f", cfg.regime, epoch + 1, cfg.epochs, history[-1])

    metadata = {
        "regime": cfg.regime,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "final_loss": history[-1] if history else None,
        "loss_history": history,
        "train_config": cfg.to_dict(),
    }
    return Checkpoint(config, params, teacher.params if teacher is not None else None, metadata)


def probe_accuracy(params: Mapping[str, np.ndarray], model: ViTModel, data: Dataset) -> float:
    feats = pooled_features(params, model.config, patchify_batch(data.images, model.config)).data
    logits = head_logits(params, feats).data
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def linear_probe(model: ViTModel, train_data: Dataset, eval_data: Dataset, cfg: TrainConfig,
                 source: Mapping | None = None) -> Checkpoint:
    """Train a zero-initialised linear head on frozen, pooled encoder features.

    Everything except ``head.*`` is carried over bit-for-bit.
    """
    config = model.config
    head = model.names("head")
    params = model.params.copy()
    for name in head:
        params[name] = np.zeros_like(params[name])
    chance = probe_accuracy(params, model, eval_data)
    feats = pooled_features(params, config, patchify_batch(train_data.images, config)).data
    labels = train_data.labels
    state = OptimizerState.zeros(params.subset(head))
    order_rng = stream(cfg.seed, "order")
    n = len(train_data)
    history: list[float] = []

    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        step_losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            with Tape() as tape:
                p = tape.watch(params.subset(head))
                loss = T.mean(cross_entropy_batch(head_logits(p, feats[idx]), labels[idx]))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            params, state = adamw_step(params, tape.backward(loss), state, cfg.learning_rate,
                                       cfg.weight_decay, cfg.betas, cfg.eps)
            step_losses.append(value)
        history.append(float(np.mean(step_losses)))

    metadata = {
        "regime": "probe",
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "final_loss": history[-1] if history else None,
        "loss_history": history,
        "train_config": cfg.to_dict(),
        "chance_accuracy": chance,
        "probe_accuracy": probe_accuracy(params, model, eval_data),
        "source": dict(source or {}),
    }
    return Checkpoint(config, params, None, metadata)
