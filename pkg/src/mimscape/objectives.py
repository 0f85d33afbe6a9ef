"""Masking, masked-reconstruction losses, the EMA teacher and cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import ViTConfig, classify_batch, decoder_forward, encoder_forward
from .params import ParameterSet
from .tensor import ContractError, DimensionError, Tensor


# -- masks ---------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    n_patches: int
    masked: tuple[int, ...]
    visible: tuple[int, ...]

    def __post_init__(self):
        m, v = set(self.masked), set(self.visible)
        if m & v or m | v != set(range(self.n_patches)) or len(m) + len(v) != self.n_patches:
            raise ContractError("masked and visible indices must partition range(n_patches)")

    @classmethod
    def from_masked(cls, n_patches: int, masked) -> "MaskSpec":
        masked = tuple(sorted(int(i) for i in masked))
        hidden = set(masked)
        return cls(n_patches, masked, tuple(i for i in range(n_patches) if i not in hidden))


def num_masked(n_patches: int, ratio: float) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio {ratio} outside [0, 1]")
    if n_patches < 1:
        raise ContractError("need at least one patch")
    return int(math.floor(ratio * n_patches + 0.5))


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Uniformly random masked subset of size ``round(ratio * n_patches)``."""
    m = num_masked(n_patches, ratio)
    return MaskSpec.from_masked(n_patches, rng.permutation(n_patches)[:m])


def sample_mask_batch(batch: int, n_patches: int, ratio: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent masks for ``batch`` images as sorted (masked, visible) index arrays."""
    m = num_masked(n_patches, ratio)
    order = np.argsort(rng.random((batch, n_patches)), axis=1)
    return np.sort(order[:, :m], axis=1), np.sort(order[:, m:], axis=1)


def stack_masks(masks: Sequence[MaskSpec]) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([m.masked for m in masks], dtype=np.intp).reshape(len(masks), -1),
            np.array([m.visible for m in masks], dtype=np.intp).reshape(len(masks), -1))


# -- reconstruction losses --------------------------------------------------------

def _masked_rows(x, idx: np.ndarray):
    if isinstance(x, Tensor):
        return T.getitem(x, idx)
    return np.asarray(x, dtype=np.float64)[idx]


def _check_pair(targets, preds) -> None:
    if np.shape(targets) != np.shape(preds):
        raise DimensionError(f"targets {np.shape(targets)} and predictions {np.shape(preds)} differ")


def mae_loss(targets, preds, mask: MaskSpec) -> Tensor:
    """Mean over masked patches of the per-patch squared error (sum over pixels).

    Rows listed in ``mask.visible`` are never read.
    """
    _check_pair(targets, preds)
    idx = np.asarray(mask.masked, dtype=np.intp)
    if idx.size == 0:
        raise ContractError("reconstruction loss needs at least one masked patch")
    err = T.sub(_masked_rows(preds, idx), _masked_rows(targets, idx))
    return T.mean(T.sum(T.square(err), axis=-1))


def rc_mae_loss(targets, student_preds, teacher_preds, mask: MaskSpec, consistency_weight: float = 1.0) -> Tensor:
    """Reconstruction plus consistency-to-teacher, averaged over masked patches.

    ``teacher_preds`` is a constant target: any gradient tracking on it is dropped.
    """
    _check_pair(targets, student_preds)
    _check_pair(targets, teacher_preds)
    idx = np.asarray(mask.masked, dtype=np.intp)
    if idx.size == 0:
        raise ContractError("reconstruction loss needs at least one masked patch")
    teacher = teacher_preds.data if isinstance(teacher_preds, Tensor) else np.asarray(teacher_preds, dtype=np.float64)
    student = _masked_rows(student_preds, idx)
    recon = T.sum(T.square(T.sub(student, _masked_rows(targets, idx))), axis=-1)
    return T.mean(_add_consistency(recon, student, teacher[idx], consistency_weight))


def _add_consistency(recon, student, teacher, weight: float):
    if weight == 0.0:
        return recon
    cons = T.sum(T.square(T.sub(student, teacher)), axis=-1)
    return T.add(recon, cons if weight == 1.0 else T.scale(cons, weight))


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch standardisation of reconstruction targets (off by default)."""
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


def masked_errors(targets: np.ndarray, preds, masked: np.ndarray):
    """Squared error per masked patch, shape (B, M)."""
    rows = np.arange(targets.shape[0])[:, None]
    picked = T.take_rows(preds, masked)
    return T.sum(T.square(T.sub(picked, targets[rows, masked])), axis=-1)


def mae_batch_losses(p: Mapping, config: ViTConfig, patches: np.ndarray, targets: np.ndarray,
                     masked: np.ndarray, visible: np.ndarray):
    """Per-image masked reconstruction loss, shape (B,)."""
    if masked.shape[1] == 0:
        raise ContractError("reconstruction loss needs at least one masked patch")
    preds = decoder_forward(p, config, encoder_forward(p, config, patches, visible), visible, masked)
    return T.mean(masked_errors(targets, preds, masked), axis=1)


def rcmae_batch_losses(p: Mapping, config: ViTConfig, patches: np.ndarray, targets: np.ndarray,
                       masked: np.ndarray, visible: np.ndarray, teacher_preds: np.ndarray | None,
                       consistency_weight: float = 1.0):
    """Per-image reconstruction + consistency loss, shape (B,).

    ``teacher_preds`` are full (B, N, D) teacher outputs under the same masks.
    """
    if masked.shape[1] == 0:
        raise ContractError("reconstruction loss needs at least one masked patch")
    preds = decoder_forward(p, config, encoder_forward(p, config, patches, visible), visible, masked)
    recon = masked_errors(targets, preds, masked)
    if consistency_weight == 0.0:
        return T.mean(recon, axis=1)
    rows = np.arange(patches.shape[0])[:, None]
    student = T.take_rows(preds, masked)
    return T.mean(_add_consistency(recon, student, teacher_preds[rows, masked], consistency_weight), axis=1)


def predict_patches(params: Mapping, config: ViTConfig, patches: np.ndarray,
                    masked: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """No-gradient full reconstruction, used for the EMA teacher."""
    z = encoder_forward(params, config, patches, visible)
    return decoder_forward(params, config, z, visible, masked).data


# -- classification -------------------------------------------------------------

def cross_entropy(logits, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single logit vector."""
    k = np.shape(logits)[-1]
    if not 0 <= int(label) < k:
        raise ContractError(f"label {label} outside [0, {k})")
    return T.scale(T.getitem(T.log_softmax(logits, axis=-1), int(label)), -1.0)


def cross_entropy_batch(logits, labels: np.ndarray):
    """Per-example cross-entropy for (B, K) logits, shape (B,)."""
    labels = np.asarray(labels, dtype=np.intp)
    k = np.shape(logits)[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.getitem(logp, (np.arange(labels.shape[0]), labels)), -1.0)


def ce_batch_losses(p: Mapping, config: ViTConfig, patches: np.ndarray, labels: np.ndarray):
    return cross_entropy_batch(classify_batch(p, config, patches), labels)


# -- EMA teacher -----------------------------------------------------------------

@dataclass
class EmaTeacher:
    params: ParameterSet
    decay: float = 0.996
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ContractError(f"EMA decay {self.decay} outside [0, 1]")

    @classmethod
    def from_student(cls, student: ParameterSet, decay: float = 0.996) -> "EmaTeacher":
        return cls(ParameterSet(student).copy(), decay, 0)


def ema_update(teacher: EmaTeacher, student: Mapping[str, np.ndarray]) -> EmaTeacher:
    """One step of ``T <- a*T + (1-a)*S``; returns a new teacher."""
    student = ParameterSet(student)
    teacher.params.check_compatible(student, "teacher and student")
    a = teacher.decay
    if a == 0.0:
        new = student.copy()
    elif a == 1.0:
        new = teacher.params.copy()
    else:
        new = ParameterSet((k, a * t + (1.0 - a) * student[k]) for k, t in teacher.params.items())
    return EmaTeacher(new, a, teacher.step + 1)


def ema_closed_form(students: Sequence[Mapping[str, np.ndarray]], initial: Mapping[str, np.ndarray],
                    decay: float) -> ParameterSet:
    """Direct evaluation of the unrolled EMA after ``len(students)`` updates.

    ``a^(t+1) * T0 + sum_i a^i (1-a) S^(t-i)`` with ``t = len(students) - 1``.
    """
    if not students:
        raise ContractError("need at least one student snapshot")
    initial = ParameterSet(initial)
    t = len(students) - 1
    out = ParameterSet()
    for name, t0 in initial.items():
        acc = decay ** (t + 1) * t0
        for i in range(t + 1):
            acc = acc + decay ** i * (1.0 - decay) * np.asarray(students[t - i][name])
        out[name] = acc
    return out
