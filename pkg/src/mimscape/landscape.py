"""Filter-normalised 2-D loss landscapes and desk-scale curvature metrics.

The grid value at ``(a, b)`` is the mean evaluation loss at parameters
``theta + a*delta + b*eta`` where ``delta`` and ``eta`` are Gaussian
directions rescaled, filter by filter, to the norm of the trained weights.
"""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .dataio import Checkpoint, Dataset
from .model import ViTModel, patchify_batch
from .objectives import (
    ce_batch_losses,
    mae_batch_losses,
    normalize_patches,
    predict_patches,
    rcmae_batch_losses,
    sample_mask_batch,
)
from .params import ParameterSet
from .rng import stream
from .tensor import ContractError

LOSS_FOR_REGIME = {"supervised": "ce", "probe": "ce", "mae": "mae", "rcmae": "rcmae"}
FILTER_POLICY = (
    "weight matrices grouped by output row (patch embedding by output channel); "
    "biases, layer-norm gains/biases and the mask token are not perturbed"
)
FILTER_POLICY_WITH_1D = "weight matrices grouped by output row; each 1-D parameter is one group"


class DirectionError(ValueError):
    """A direction filter has zero norm where the weights do not; resample."""


class ReportError(ValueError):
    pass


# -- directions ----------------------------------------------------------------------

@dataclass
class DirectionPair:
    delta: ParameterSet
    eta: ParameterSet
    seed: int
    normalized: bool = False

    def negated(self) -> "DirectionPair":
        neg = lambda ps: ps.map(lambda _, v: -v)  # noqa: E731
        return DirectionPair(neg(self.delta), neg(self.eta), self.seed, self.normalized)


def sample_directions(params: Mapping[str, np.ndarray], seed: int) -> DirectionPair:
    """Two i.i.d. standard-normal directions shaped like ``params``."""
    rng = stream(seed, "directions")
    params = ParameterSet(params)
    delta = params.map(lambda _, v: rng.standard_normal(v.shape))
    eta = params.map(lambda _, v: rng.standard_normal(v.shape))
    return DirectionPair(delta, eta, seed, False)


def filter_groups(value: np.ndarray) -> np.ndarray:
    """View of ``value`` as (groups, members): one row per output filter."""
    if value.ndim >= 2:
        return value.reshape(value.shape[0], -1)
    return value.reshape(1, -1)


def filter_normalize(direction: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray],
                     perturbed: Iterable[str] | None = None, include_1d: bool = False) -> ParameterSet:
    """Rescale every filter of ``direction`` to the norm of the matching filter of ``params``.

    Parameters outside ``perturbed`` (default: all) and, unless
    ``include_1d``, every 1-D parameter get an all-zero direction. Filters
    whose weights are all zero also stay at zero.
    """
    direction, params = ParameterSet(direction), ParameterSet(params)
    params.check_compatible(direction, "parameters and direction")
    chosen = set(params) if perturbed is None else set(perturbed)
    out = ParameterSet()
    for name, theta in params.items():
        d = np.asarray(direction[name], dtype=np.float64)
        if name not in chosen or (theta.ndim < 2 and not include_1d):
            out[name] = np.zeros_like(d)
            continue
        dg, tg = filter_groups(d), filter_groups(theta)
        d_norm = np.linalg.norm(dg, axis=1, keepdims=True)
        t_norm = np.linalg.norm(tg, axis=1, keepdims=True)
        if np.any((d_norm == 0) & (t_norm > 0)):
            raise DirectionError(f"{name}: zero-norm direction filter against nonzero weights")
        ratio = np.divide(t_norm, d_norm, out=np.zeros_like(t_norm), where=t_norm > 0)
        out[name] = (dg * ratio).reshape(d.shape)
    return out


def normalize_directions(pair: DirectionPair, params: Mapping[str, np.ndarray],
                         perturbed: Iterable[str] | None = None, include_1d: bool = False) -> DirectionPair:
    perturbed = None if perturbed is None else list(perturbed)
    return DirectionPair(filter_normalize(pair.delta, params, perturbed, include_1d),
                         filter_normalize(pair.eta, params, perturbed, include_1d), pair.seed, True)


def perturbed_names(model: ViTModel, regime: str, head_only: bool = False) -> list[str]:
    if regime in ("supervised", "probe"):
        return model.names("head") if head_only else model.names("encoder", "head")
    if regime in ("mae", "rcmae"):
        return model.names("encoder", "decoder")
    raise ContractError(f"unknown regime {regime!r}")


# -- loss evaluation ---------------------------------------------------------------------

@dataclass
class LossEvaluator:
    """Mean per-image loss over a fixed evaluation set.

    Masks (and, for RC-MAE, teacher predictions) are fixed at construction
    so repeated calls differ only through the parameters passed in.
    """

    model: ViTModel
    loss: str
    patches: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    masked: np.ndarray | None = None
    visible: np.ndarray | None = None
    teacher_preds: np.ndarray | None = None
    consistency_weight: float = 1.0

    def per_image(self, params: Mapping[str, np.ndarray]) -> np.ndarray:
        config = self.model.config
        if self.loss == "ce":
            out = ce_batch_losses(params, config, self.patches, self.labels)
        elif self.loss == "mae":
            out = mae_batch_losses(params, config, self.patches, self.targets, self.masked, self.visible)
        else:
            out = rcmae_batch_losses(params, config, self.patches, self.targets, self.masked, self.visible,
                                     self.teacher_preds, self.consistency_weight)
        return out.data

    def __call__(self, params: Mapping[str, np.ndarray]) -> float:
        with np.errstate(all="ignore"):
            value = float(np.mean(self.per_image(params)))
        return value if np.isfinite(value) else float("inf")


def make_evaluator(ckpt: Checkpoint, data: Dataset, loss: str | None = None, eval_seed: int = 0,
                   mask_ratio: float | None = None) -> LossEvaluator:
    """Evaluation closure for a checkpoint under ``loss`` (default: its own regime's loss)."""
    loss = loss or LOSS_FOR_REGIME.get(ckpt.regime)
    if loss not in ("ce", "mae", "rcmae"):
        raise ContractError(f"unknown loss {loss!r}")
    train_cfg = ckpt.metadata.get("train_config", {})
    model = ckpt.model()
    config = model.config
    patches = patchify_batch(data.images, config)
    targets = normalize_patches(patches) if train_cfg.get("norm_pix") else patches
    ev = LossEvaluator(model, loss, patches, targets, data.labels)
    if loss in ("mae", "rcmae"):
        ratio = train_cfg.get("mask_ratio", 0.75) if mask_ratio is None else mask_ratio
        ev.masked, ev.visible = sample_mask_batch(len(data), config.num_patches, ratio, stream(eval_seed, "eval-mask"))
    if loss == "rcmae":
        if ckpt.teacher is None:
            raise ContractError("the RC-MAE loss needs a checkpoint carrying an EMA teacher")
        ev.teacher_preds = predict_patches(ckpt.teacher, config, patches, ev.masked, ev.visible)
        ev.consistency_weight = float(train_cfg.get("consistency_weight", 1.0))
    return ev


# -- grids ------------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # losses[i, j] at (alphas[i], betas[j])
    base_loss: float
    regime: str = "unknown"
    direction_seed: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return len(self.alphas)

    @property
    def center(self) -> tuple[int, int]:
        return int(np.flatnonzero(self.alphas == 0.0)[0]), int(np.flatnonzero(self.betas == 0.0)[0])


def grid_coordinates(resolution: int, half_range: float) -> np.ndarray:
    if resolution < 1 or resolution % 2 == 0:
        raise ContractError(f"resolution must be a positive odd integer, got {resolution}")
    m = (resolution - 1) // 2
    if m == 0:
        return np.zeros(1)
    return np.array([half_range * k / m for k in range(-m, m + 1)])


def perturb(params: Mapping[str, np.ndarray], pair: DirectionPair, alpha: float, beta: float) -> ParameterSet:
    """``theta + alpha*delta + beta*eta``; the origin returns ``theta`` unchanged."""
    params = ParameterSet(params)
    if alpha == 0.0 and beta == 0.0:
        return params
    return ParameterSet((k, v + alpha * pair.delta[k] + beta * pair.eta[k]) for k, v in params.items())


_WORKER: dict = {}


def _init_worker(evaluator, params, pair, alphas, betas) -> None:
    _WORKER.update(evaluator=evaluator, params=params, pair=pair, alphas=alphas, betas=betas)


def _grid_row(i: int) -> np.ndarray:
    w = _WORKER
    a = w["alphas"][i]
    return np.array([w["evaluator"](perturb(w["params"], w["pair"], a, b)) for b in w["betas"]])


def evaluate_grid(evaluator, params: Mapping[str, np.ndarray], pair: DirectionPair, resolution: int = 41,
                  half_range: float = 1.0, workers: int = 1, regime: str = "unknown",
                  metadata: dict | None = None) -> LandscapeGrid:
    """Evaluate the loss on a ``resolution x resolution`` grid of direction coefficients.

    Rows are dispatched to ``workers`` processes; each row lands in its own
    slot, so the result is identical for any worker count. Non-finite
    losses are stored as ``inf``.
    """
    if not pair.normalized:
        raise ContractError("directions must be filter-normalised before evaluating a grid")
    params = ParameterSet(params)
    alphas = grid_coordinates(resolution, half_range)
    betas = alphas.copy()
    losses = np.empty((resolution, resolution))
    args = (evaluator, params, pair, alphas, betas)
    if workers <= 1:
        _init_worker(*args)
        try:
            rows = [_grid_row(i) for i in range(resolution)]
        finally:
            _WORKER.clear()
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker, initargs=args) as pool:
            rows = list(pool.map(_grid_row, range(resolution)))
    for i, row in enumerate(rows):
        losses[i] = row
    c = (resolution - 1) // 2
    return LandscapeGrid(alphas, betas, losses, float(losses[c, c]), regime, pair.seed, dict(metadata or {}))


# -- metrics ------------------------------------------------------------------------------

@dataclass
class CurvatureReport:
    convexity_fraction: float
    flatness_radius: float
    loss_range: float
    center_gap: float

    def to_dict(self) -> dict:
        return asdict(self)


def default_epsilon(base_loss: float) -> float:
    return 0.1 * (base_loss + 1e-8)


def curvature_report(grid: LandscapeGrid, epsilon: float | None = None) -> CurvatureReport:
    """Convexity fraction, flatness radius, loss range and center gap of a grid.

    A point counts as convex when the central-difference Hessian
    ``[[f_aa, f_ab], [f_ab, f_bb]]`` is positive semidefinite; the tolerance
    absorbs rounding noise only. Points next to an ``inf`` are not convex.
    """
    f = np.asarray(grid.losses, dtype=np.float64)
    n = f.shape[0]
    if n < 5 or f.shape != (n, n):
        raise ReportError(f"curvature report needs a square grid of resolution >= 5, got {f.shape}")
    finite = np.isfinite(f)
    if not finite.any():
        raise ReportError("every grid value is infinite")
    h = float(grid.alphas[1] - grid.alphas[0])
    k = float(grid.betas[1] - grid.betas[0])
    scale = float(np.max(np.abs(f[finite])))

    with np.errstate(invalid="ignore"):
        c = f[1:-1, 1:-1]
        faa = (f[2:, 1:-1] - 2 * c + f[:-2, 1:-1]) / h ** 2
        fbb = (f[1:-1, 2:] - 2 * c + f[1:-1, :-2]) / k ** 2
        fab = (f[2:, 2:] - f[2:, :-2] - f[:-2, 2:] + f[:-2, :-2]) / (4 * h * k)
        tol = 1e-9 * max(scale, 1.0) / min(h, k) ** 2
        ok = np.isfinite(faa) & np.isfinite(fbb) & np.isfinite(fab)
        psd = ok & (faa >= -tol) & (fbb >= -tol) & (faa * fbb - fab * fab >= -tol * (np.abs(faa) + np.abs(fbb) + tol))
    convexity = float(psd.mean())

    ci, cj = grid.center
    base = float(f[ci, cj])
    eps = default_epsilon(base) if epsilon is None else epsilon
    radius_steps = 0
    for r in range(1, min(ci, cj, n - 1 - ci, n - 1 - cj) + 1):
        window = f[ci - r:ci + r + 1, cj - r:cj + r + 1]
        if not np.all(window <= base + eps):
            break
        radius_steps = r
    radius = float(min(abs(grid.alphas[ci + radius_steps]), abs(grid.betas[cj + radius_steps])))

    vals = f[finite]
    return CurvatureReport(convexity, radius, float(vals.max() - vals.min()), float(vals.mean() - base))
