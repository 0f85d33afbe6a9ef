"""Command-line entry point: ``mimscape <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
Default output locations are relative to ``$MIMSCAPE_OUTPUT_DIR`` (or the
current directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .dataio import FormatError, load_checkpoint, read_grid_csv, save_checkpoint, write_loss_history
from .landscape import LOSS_FOR_REGIME, DirectionError, ReportError, curvature_report
from .model import ViTConfig
from .pipeline import (
    DataSpec,
    LandscapeRequest,
    ReproduceOptions,
    eval_loss,
    format_summary,
    reproduce,
    run_landscape,
    run_probe,
    run_train,
    save_landscape,
)
from .render import RenderError, RenderSpec, render_svg
from .tensor import ContractError, DimensionError
from .training import TrainConfig, TrainingError

ENV_OUTPUT_DIR = "MIMSCAPE_OUTPUT_DIR"

log = logging.getLogger("mimscape")


class UsageError(Exception):
    pass


def output_dir() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_DIR, "."))


def _out_path(given: str | None, default_name: str) -> Path:
    path = Path(given) if given else output_dir() / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- subcommands ------------------------------------------------------------------

def _config_from(args) -> ViTConfig:
    return ViTConfig(
        image_size=args.image_size, channels=1, patch_size=args.patch_size,
        encoder_depth=args.encoder_depth, decoder_depth=args.decoder_depth,
        embed_dim=args.embed_dim, decoder_dim=args.decoder_dim, heads=args.heads,
        decoder_heads=args.decoder_heads, mlp_ratio=args.mlp_ratio, num_classes=args.num_classes,
    )


def _data_from(args) -> DataSpec:
    if bool(args.idx_images) != bool(args.idx_labels):
        raise UsageError("--idx-images and --idx-labels must be given together")
    return DataSpec(args.n_train, args.n_eval, args.data_seed, args.idx_images, args.idx_labels,
                    args.idx_eval_images, args.idx_eval_labels)


def cmd_train(args) -> int:
    cfg = TrainConfig(
        regime=args.regime, epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        weight_decay=args.weight_decay, betas=(args.beta1, args.beta2), seed=args.seed,
        mask_ratio=args.mask_ratio, ema_decay=args.ema_decay,
        consistency_weight=args.consistency_weight, norm_pix=args.norm_pix,
    )
    ckpt = run_train(_config_from(args), cfg, _data_from(args))
    path = _out_path(args.out, f"{args.regime}-seed{args.seed}.ckpt")
    checksum = save_checkpoint(ckpt, path)
    history = path.with_name(path.stem + "_loss.csv")
    write_loss_history(ckpt.metadata["loss_history"], history)
    final = ckpt.metadata["final_loss"]
    print(f"checkpoint: {path}")
    print(f"loss history: {history}")
    print(f"checksum: {checksum}")
    print(f"final loss: {final!r}" if final is not None else "final loss: n/a (0 epochs)")
    return 0


def cmd_probe(args) -> int:
    source = load_checkpoint(args.checkpoint)
    if source.regime not in ("mae", "rcmae", "supervised"):
        raise UsageError(f"cannot probe a checkpoint of regime {source.regime!r}")
    cfg = TrainConfig(regime="probe", epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      weight_decay=args.weight_decay, seed=args.seed)
    ckpt = run_probe(source, cfg, args.checkpoint)
    path = _out_path(args.out, f"{source.regime}-probe-seed{args.seed}.ckpt")
    checksum = save_checkpoint(ckpt, path)
    write_loss_history(ckpt.metadata["loss_history"], path.with_name(path.stem + "_loss.csv"))
    print(f"checkpoint: {path}")
    print(f"checksum: {checksum}")
    print(f"chance accuracy: {ckpt.metadata['chance_accuracy']:.4f}")
    print(f"probe accuracy: {ckpt.metadata['probe_accuracy']:.4f}")
    return 0


def _resolve_loss(ckpt, requested: str | None, allow_mismatch: bool) -> str:
    native = LOSS_FOR_REGIME.get(ckpt.regime)
    if requested is None:
        if native is None:
            raise UsageError(f"checkpoint regime {ckpt.regime!r} has no default loss; pass --loss")
        return native
    if requested != native and not allow_mismatch:
        raise UsageError(f"loss {requested!r} does not match checkpoint regime {ckpt.regime!r} "
                         f"(expects {native!r}); pass --allow-mismatch to override")
    return requested


def cmd_eval_loss(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    loss = _resolve_loss(ckpt, args.loss, args.allow_mismatch)
    value = eval_loss(ckpt, loss, args.eval_seed)
    print(repr(value))
    return 0


def cmd_landscape(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    loss = _resolve_loss(ckpt, args.loss, args.allow_mismatch)
    req = LandscapeRequest(loss=loss, direction_seed=args.direction_seed, eval_seed=args.eval_seed,
                           resolution=args.resolution, half_range=args.half_range, workers=args.workers,
                           head_only=args.head_only, include_1d=args.include_1d, epsilon=args.epsilon)
    grid, report = run_landscape(ckpt, req)
    path = _out_path(args.out, f"{Path(args.checkpoint).stem}_grid.csv")
    sidecar = save_landscape(grid, path)
    print(f"grid: {path}")
    print(f"metadata: {sidecar}")
    print(f"center loss: {grid.base_loss!r}")
    if report is not None:
        for key, value in report.to_dict().items():
            print(f"{key}: {value:.6g}")
    return 0


def cmd_render(args) -> int:
    grid = read_grid_csv(args.grid)
    path = _out_path(args.out, Path(args.grid).stem + ".svg")
    log_scale = args.log_scale if args.log_scale is not None else grid.metadata.get("loss") in ("mae", "rcmae")
    render_svg(grid, RenderSpec(args.mode, args.levels, log_scale, str(path)))
    print(f"svg: {path}")
    return 0


def compare_reports(grid_a, grid_b, epsilon: float | None = None) -> dict:
    if grid_a.losses.shape != grid_b.losses.shape or not (
            (grid_a.alphas == grid_b.alphas).all() and (grid_a.betas == grid_b.betas).all()):
        raise ContractError("grids do not share coordinates")
    ra, rb = curvature_report(grid_a, epsilon).to_dict(), curvature_report(grid_b, epsilon).to_dict()
    return {"a": ra, "b": rb, "delta": {k: rb[k] - ra[k] for k in ra}}


def cmd_compare(args) -> int:
    ga, gb = read_grid_csv(args.grid_a), read_grid_csv(args.grid_b)
    result = compare_reports(ga, gb, args.epsilon)
    result["labels"] = {"a": args.label_a or str(args.grid_a), "b": args.label_b or str(args.grid_b)}
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0
    la, lb = result["labels"]["a"], result["labels"]["b"]
    print(f"{'metric':<20} {'a':>14} {'b':>14} {'b - a':>14}")
    for key in ("convexity_fraction", "flatness_radius", "loss_range", "center_gap"):
        print(f"{key:<20} {result['a'][key]:>14.6g} {result['b'][key]:>14.6g} {result['delta'][key]:>14.6g}")
    print(f"a = {la}")
    print(f"b = {lb}")
    return 0


def cmd_reproduce(args) -> int:
    opts = ReproduceOptions(
        seeds=tuple(args.seeds), out_dir=str(Path(args.out_dir) if args.out_dir else output_dir() / "reproduce"),
        workers=args.workers, resolution=args.resolution, half_range=args.half_range,
        pretrain_epochs=args.pretrain_epochs, supervised_epochs=args.supervised_epochs,
        probe_epochs=args.probe_epochs, rcmae_probe=args.rcmae_probe, figures=not args.no_figures,
    )
    summary = reproduce(opts)
    print(format_summary(summary))
    print(f"outputs: {opts.out_dir}")
    return 0


# -- parser ----------------------------------------------------------------------

def _add_model_flags(p) -> None:
    d = ViTConfig()
    g = p.add_argument_group("model")
    g.add_argument("--image-size", type=int, default=d.image_size)
    g.add_argument("--patch-size", type=int, default=d.patch_size)
    g.add_argument("--encoder-depth", type=int, default=d.encoder_depth)
    g.add_argument("--decoder-depth", type=int, default=d.decoder_depth)
    g.add_argument("--embed-dim", type=int, default=d.embed_dim)
    g.add_argument("--decoder-dim", type=int, default=d.decoder_dim)
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--decoder-heads", type=int, default=d.decoder_heads)
    g.add_argument("--mlp-ratio", type=float, default=d.mlp_ratio)
    g.add_argument("--num-classes", type=int, default=d.num_classes)


def _add_data_flags(p) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-eval", type=int, default=256)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--idx-images")
    g.add_argument("--idx-labels")
    g.add_argument("--idx-eval-images")
    g.add_argument("--idx-eval-labels")


def _add_loss_flags(p) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--loss", choices=("ce", "mae", "rcmae"), help="defaults to the checkpoint's own loss")
    p.add_argument("--allow-mismatch", action="store_true", help="permit a loss that differs from the checkpoint regime")
    p.add_argument("--eval-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimscape", description="Loss landscapes of tiny supervised, MAE and RC-MAE ViTs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train supervised / mae / rcmae from scratch")
    p.add_argument("--regime", choices=("supervised", "mae", "rcmae"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.95)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--ema-decay", type=float, default=0.996)
    p.add_argument("--consistency-weight", type=float, default=1.0)
    p.add_argument("--norm-pix", action="store_true", help="per-patch normalised reconstruction targets")
    p.add_argument("--out", help="checkpoint path")
    _add_model_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear probe on a frozen pretrained encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval-loss", help="mean evaluation loss at the checkpoint weights")
    _add_loss_flags(p)
    p.add_argument("--seed", dest="eval_seed", type=int, default=argparse.SUPPRESS, help="alias of --eval-seed")
    p.set_defaults(func=cmd_eval_loss)

    p = sub.add_parser("landscape", help="filter-normalised 2-D loss grid around a checkpoint")
    _add_loss_flags(p)
    p.add_argument("--seed", "--direction-seed", dest="direction_seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--half-range", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--head-only", action="store_true", help="perturb only the classifier head (cross-entropy)")
    p.add_argument("--include-1d", action="store_true", help="also perturb biases, norms and the mask token")
    p.add_argument("--epsilon", type=float, help="flatness tolerance (default 10%% of the center loss)")
    p.add_argument("--out", help="grid CSV path; metadata goes next to it as .json")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("render", help="render a grid CSV as SVG")
    p.add_argument("--grid", required=True)
    p.add_argument("--mode", choices=("contour", "heatmap", "both"), default="both")
    p.add_argument("--levels", type=int, default=12)
    p.add_argument("--log-scale", dest="log_scale", action="store_true", default=None)
    p.add_argument("--linear", dest="log_scale", action="store_false")
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare", help="side-by-side curvature reports of two grids")
    p.add_argument("grid_a")
    p.add_argument("grid_b")
    p.add_argument("--label-a")
    p.add_argument("--label-b")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce", help="full pipeline across regimes and seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--half-range", type=float, default=1.0)
    p.add_argument("--pretrain-epochs", type=int, default=50)
    p.add_argument("--supervised-epochs", type=int, default=50)
    p.add_argument("--probe-epochs", type=int, default=30)
    p.add_argument("--rcmae-probe", action="store_true", help="also probe the RC-MAE encoder and map its grid")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mimscape: error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, DimensionError, FormatError, TrainingError, DirectionError, ReportError,
            RenderError, OSError) as exc:
        print(f"mimscape: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
