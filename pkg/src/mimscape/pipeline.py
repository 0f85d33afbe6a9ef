"""End-to-end workflows shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataio import Checkpoint, Dataset, default_splits, load_idx, save_checkpoint, write_grid_csv, write_json, write_loss_history
from .landscape import (
    FILTER_POLICY,
    FILTER_POLICY_WITH_1D,
    LOSS_FOR_REGIME,
    CurvatureReport,
    LandscapeGrid,
    curvature_report,
    evaluate_grid,
    make_evaluator,
    normalize_directions,
    perturbed_names,
    sample_directions,
)
from .model import ViTConfig, ViTModel
from .render import RenderSpec, render_svg
from .training import TrainConfig, linear_probe, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 512
    n_eval: int = 256
    seed: int = 0
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_eval_images: str | None = None
    idx_eval_labels: str | None = None

    def load(self, config: ViTConfig) -> tuple[Dataset, Dataset]:
        if self.idx_images:
            train_set = load_idx(self.idx_images, self.idx_labels, config, "train")
            eval_set = (load_idx(self.idx_eval_images, self.idx_eval_labels, config, "eval")
                        if self.idx_eval_images else Dataset(train_set.images, train_set.labels, "eval"))
            return train_set, eval_set
        return default_splits(config, self.n_train, self.n_eval, self.seed)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        return cls(**d)


def config_hash(config: ViTConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def checkpoint_data(ckpt: Checkpoint) -> DataSpec:
    return DataSpec.from_dict(ckpt.metadata.get("data", {}))


def run_train(config: ViTConfig, cfg: TrainConfig, data: DataSpec) -> Checkpoint:
    train_set, _ = data.load(config)
    ckpt = train(ViTModel.create(config, cfg.seed), train_set, cfg)
    ckpt.metadata["data"] = data.to_dict()
    return ckpt


def run_probe(source: Checkpoint, cfg: TrainConfig, source_path: str | None = None) -> Checkpoint:
    data = checkpoint_data(source)
    train_set, eval_set = data.load(source.config)
    info = {"regime": source.regime, "seed": source.metadata.get("seed")}
    if source_path:
        info["path"] = str(source_path)
    ckpt = linear_probe(source.model(), train_set, eval_set, replace(cfg, regime="probe"), info)
    ckpt.metadata["data"] = data.to_dict()
    return ckpt


@dataclass
class LandscapeRequest:
    loss: str | None = None
    direction_seed: int = 0
    eval_seed: int = 0
    resolution: int = 41
    half_range: float = 1.0
    workers: int = 1
    head_only: bool = False
    include_1d: bool = False
    epsilon: float | None = None


def eval_loss(ckpt: Checkpoint, loss: str | None = None, eval_seed: int = 0) -> float:
    _, eval_set = checkpoint_data(ckpt).load(ckpt.config)
    return make_evaluator(ckpt, eval_set, loss, eval_seed)(ckpt.params)


def run_landscape(ckpt: Checkpoint, req: LandscapeRequest) -> tuple[LandscapeGrid, CurvatureReport]:
    _, eval_set = checkpoint_data(ckpt).load(ckpt.config)
    loss = req.loss or LOSS_FOR_REGIME[ckpt.regime]
    evaluator = make_evaluator(ckpt, eval_set, loss, req.eval_seed)
    model = ckpt.model()
    names = perturbed_names(model, "supervised" if loss == "ce" else "mae", req.head_only)
    pair = normalize_directions(sample_directions(ckpt.params, req.direction_seed), ckpt.params, names, req.include_1d)
    meta = {
        "regime": ckpt.regime,
        "loss": loss,
        "train_seed": ckpt.metadata.get("seed"),
        "direction_seed": req.direction_seed,
        "eval_seed": req.eval_seed,
        "config_hash": config_hash(ckpt.config),
        "filter_policy": FILTER_POLICY_WITH_1D if req.include_1d else FILTER_POLICY,
        "perturbed": "head" if req.head_only else ("encoder+head" if loss == "ce" else "encoder+decoder"),
        "resolution": req.resolution,
        "half_range": req.half_range,
        "n_eval": len(eval_set),
    }
    grid = evaluate_grid(evaluator, ckpt.params, pair, req.resolution, req.half_range, req.workers, ckpt.regime, meta)
    report = curvature_report(grid, req.epsilon) if req.resolution >= 5 else None
    grid.metadata["curvature"] = report.to_dict() if report else None
    return grid, report


def save_landscape(grid: LandscapeGrid, csv_path) -> Path:
    csv_path = Path(csv_path)
    write_grid_csv(grid, csv_path)
    sidecar = csv_path.with_suffix(".json")
    write_json(dict(grid.metadata, base_loss=grid.base_loss), sidecar)
    return sidecar


# -- reproduction -------------------------------------------------------------------

@dataclass
class ReproduceOptions:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "reproduce-out"
    workers: int = 1
    resolution: int = 41
    half_range: float = 1.0
    pretrain_epochs: int = 50
    supervised_epochs: int = 50
    probe_epochs: int = 30
    data: DataSpec = field(default_factory=DataSpec)
    config: ViTConfig = field(default_factory=ViTConfig)
    rcmae_probe: bool = False
    figures: bool = True


SUMMARY_COLUMNS = [
    "seed",
    "mae_convexity", "rcmae_convexity", "rcmae_ge_mae",
    "supervised_flatness", "mae_probe_flatness", "probe_ge_supervised",
    "mae_flatness", "rcmae_flatness", "supervised_convexity", "mae_probe_convexity",
    "mae_probe_accuracy", "rcmae_probe_accuracy", "seconds",
]


def reproduce(opts: ReproduceOptions) -> dict:
    """Train every regime per seed, take landscapes, and compare curvature metrics.

    Writes checkpoints, grid CSV/JSON pairs, SVG and PNG figures, and
    ``summary.csv`` / ``summary.json`` under ``opts.out_dir``.
    """
    out = Path(opts.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = opts.config
    rows = []
    for seed in opts.seeds:
        t0 = time.perf_counter()
        sd = out / f"seed{seed}"
        sd.mkdir(exist_ok=True)
        ckpts = {
            "supervised": run_train(config, TrainConfig(regime="supervised", epochs=opts.supervised_epochs, seed=seed), opts.data),
            "mae": run_train(config, TrainConfig(regime="mae", epochs=opts.pretrain_epochs, seed=seed), opts.data),
            "rcmae": run_train(config, TrainConfig(regime="rcmae", epochs=opts.pretrain_epochs, seed=seed), opts.data),
        }
        probe_cfg = TrainConfig(regime="probe", epochs=opts.probe_epochs, seed=seed)
        ckpts["mae_probe"] = run_probe(ckpts["mae"], probe_cfg)
        if opts.rcmae_probe:
            ckpts["rcmae_probe"] = run_probe(ckpts["rcmae"], probe_cfg)

        grids, reports = {}, {}
        req = LandscapeRequest(direction_seed=seed, eval_seed=seed, resolution=opts.resolution,
                               half_range=opts.half_range, workers=opts.workers)
        for name, ckpt in ckpts.items():
            save_checkpoint(ckpt, sd / f"{name}.ckpt")
            if "loss_history" in ckpt.metadata:
                write_loss_history(ckpt.metadata["loss_history"], sd / f"{name}_loss.csv")
            grid, report = run_landscape(ckpt, req)
            grids[name], reports[name] = grid, report
            save_landscape(grid, sd / f"{name}_grid.csv")
            render_svg(grid, RenderSpec(mode="both", levels=12, log_scale=True, output=str(sd / f"{name}.svg")))
            log.info("seed %d %s: %s", seed, name, report)

        if opts.figures:
            from .figures import center_slices, landscape_panels

            pre = {k: grids[k] for k in ("mae", "rcmae")}
            ce = {k: grids[k] for k in ("supervised", "mae_probe", "rcmae_probe") if k in grids}
            landscape_panels(pre, sd / "pretraining.png", f"pretraining loss, seed {seed}")
            landscape_panels(ce, sd / "cross_entropy.png", f"cross-entropy loss, seed {seed}")
            center_slices(grids, sd / "center_slices.png")

        row = {
            "seed": seed,
            "mae_convexity": reports["mae"].convexity_fraction,
            "rcmae_convexity": reports["rcmae"].convexity_fraction,
            "supervised_flatness": reports["supervised"].flatness_radius,
            "mae_probe_flatness": reports["mae_probe"].flatness_radius,
            "mae_flatness": reports["mae"].flatness_radius,
            "rcmae_flatness": reports["rcmae"].flatness_radius,
            "supervised_convexity": reports["supervised"].convexity_fraction,
            "mae_probe_convexity": reports["mae_probe"].convexity_fraction,
            "mae_probe_accuracy": ckpts["mae_probe"].metadata["probe_accuracy"],
            "rcmae_probe_accuracy": ckpts["rcmae_probe"].metadata["probe_accuracy"] if opts.rcmae_probe else None,
        }
        row["rcmae_ge_mae"] = row["rcmae_convexity"] >= row["mae_convexity"]
        row["probe_ge_supervised"] = row["mae_probe_flatness"] >= row["supervised_flatness"]
        row["seconds"] = round(time.perf_counter() - t0, 1)
        rows.append(row)

    wins_a = sum(r["rcmae_ge_mae"] for r in rows)
    wins_b = sum(r["probe_ge_supervised"] for r in rows)
    need = len(rows) // 2 + 1
    summary = {
        "seeds": list(opts.seeds),
        "rows": rows,
        "rcmae_convexity_wins": wins_a,
        "probe_flatness_wins": wins_b,
        "required_wins": need,
        "rcmae_wider_convexity": wins_a >= need,
        "probe_flatter_than_supervised": wins_b >= need,
    }
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_json(summary, out / "summary.json")
    if opts.figures:
        from .figures import metric_bars

        seeds = [r["seed"] for r in rows]
        metric_bars(seeds, {"MAE": [r["mae_convexity"] for r in rows], "RC-MAE": [r["rcmae_convexity"] for r in rows]},
                    "convexity fraction", out / "convexity.png")
        metric_bars(seeds, {"supervised": [r["supervised_flatness"] for r in rows],
                            "MAE probe": [r["mae_probe_flatness"] for r in rows]},
                    "flatness radius", out / "flatness.png")
    return summary


def format_summary(summary: dict) -> str:
    head = f"{'seed':>4}  {'conv MAE':>9} {'conv RC':>9} {'a':>3}  {'flat sup':>9} {'flat probe':>10} {'b':>3}  {'probe acc':>9}"
    lines = [head, "-" * len(head)]
    for r in summary["rows"]:
        lines.append(
            f"{r['seed']:>4}  {r['mae_convexity']:>9.4f} {r['rcmae_convexity']:>9.4f} {'ok' if r['rcmae_ge_mae'] else '--':>3}  "
            f"{r['supervised_flatness']:>9.3f} {r['mae_probe_flatness']:>10.3f} {'ok' if r['probe_ge_supervised'] else '--':>3}  "
            f"{r['mae_probe_accuracy']:>9.3f}"
        )
    n = len(summary["rows"])
    lines.append(f"(a) RC-MAE convexity >= MAE: {summary['rcmae_convexity_wins']}/{n} "
                 f"(need {summary['required_wins']}) -> {'PASS' if summary['rcmae_wider_convexity'] else 'FAIL'}")
    lines.append(f"(b) MAE-probe flatness >= supervised: {summary['probe_flatness_wins']}/{n} "
                 f"(need {summary['required_wins']}) -> {'PASS' if summary['probe_flatter_than_supervised'] else 'FAIL'}")
    return "\n".join(lines)
