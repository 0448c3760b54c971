"""Command-line entry point: generate, estimate, train, eval, quantize, infer, sweep, synth."""
import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from archgen import (
    GRID_DEPTHS,
    GRID_SCALES,
    ArchConfig,
    ConvType,
    ResourceEstimate,
    build_graph,
    enumerate_grid,
    estimate_resources,
    format_scale,
    grid_position,
    grid_table,
    parse_config_id,
)
from dataio import (
    load_dataset,
    load_images,
    load_model,
    save_dataset,
    save_model,
    split,
    stack,
    synth_cracks,
    write_mask,
    write_overlay,
)
from errors import (
    DatasetError,
    ModelFormatError,
    NumericDivergenceError,
    PrecisionMismatchError,
    ShapeMismatchError,
)
from evaluation import metrics_from_table, per_image_confusion, predict
from pipeline import run_sweep
from quantization import QuantizedModel, calibrate, quantization_report, quantize_model
from settings import RunSettings, load_settings
from sweep_table import create_sweep_table, divergence_note, format_table_text, mark_pareto, plot_tradeoff
from tensorops import FloatModel, init_params
from training import TrainConfig, plot_history, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_PRECISION = 5
EXIT_SHAPE = 6

CONV_CHOICES = {
    "standard": ConvType.STANDARD,
    "conv2d": ConvType.STANDARD,
    "depthwise": ConvType.DEPTHWISE_SEPARABLE,
    "dwconv2d": ConvType.DEPTHWISE_SEPARABLE,
}


class UsageError(Exception):
    pass


def _grid_help() -> str:
    scales = ", ".join(f"x{format_scale(s)}" for s in GRID_SCALES)
    return f"depths {list(GRID_DEPTHS)}, scales {scales}, conv types standard / depthwise"


def _add_arch_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--depth", type=int, default=5, help="conv blocks: 5, 4 or 3")
    parser.add_argument("--scale", default="1", help="filter scale: 1, 1/2, 1/4, 1/8, 1/16")
    parser.add_argument("--conv", choices=sorted(CONV_CHOICES), default="standard")
    parser.add_argument("--layout", choices=["block", "per_conv"], default="block",
                        help="depthwise-separable block layout")
    parser.add_argument("--off-grid", action="store_true", help="allow depths and scales outside the grid")


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--data", type=Path, default=None, help="dataset root with images/ and masks/")
    source.add_argument("--synthetic", type=int, default=None, metavar="N", help="use N synthetic samples")
    parser.add_argument("--center-crop", action="store_true", default=None)
    parser.add_argument("--input-size", type=int, default=None)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", dest="learning_rate", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--no-augment", dest="augment", action="store_false", default=None,
                        help="train on the images as given, without flipped and rotated views")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microseg",
        description="Lightweight U-Net crack segmentation: generate, train, quantize, evaluate and sweep.",
    )
    parser.add_argument("--workdir", type=Path, default=None, help="base directory for relative paths")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", type=Path, default=None, help="JSON file of settings (flags win)")
    parser.add_argument("--no-timestamp", action="store_true", help="leave timestamps out of reports")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("generate", help="write a randomly initialized model")
    _add_arch_flags(p)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--estimate", action="store_true", help="also print the resource estimate")
    p.add_argument("--out", type=Path, default=Path("model.mseg"))

    p = commands.add_parser("estimate", help="static params / MACs / flash / RAM accounting")
    _add_arch_flags(p)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--grid", action="store_true", help="tabulate the whole grid")
    p.add_argument("--weight-width", type=int, choices=[1, 4], default=1)
    p.add_argument("--out", type=Path, default=None, help="write the estimate as JSON (or CSV with --grid)")

    p = commands.add_parser("train", help="train a model on a dataset")
    _add_arch_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--model", type=Path, default=None, help="start from this float model")
    p.add_argument("--out", type=Path, default=Path("model.mseg"))
    p.add_argument("--history", type=Path, default=Path("history.csv"))
    p.add_argument("--plot", type=Path, default=None, help="write training curves to this PNG")

    p = commands.add_parser("eval", help="metrics of one or more models on a split")
    _add_data_flags(p)
    p.add_argument("--model", type=Path, action="append", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--aggregation", choices=["micro", "macro"], default=None)
    p.add_argument("--out", type=Path, default=Path("eval"), help="prefix for the JSON and CSV reports")

    p = commands.add_parser("quantize", help="post-training int8 quantization")
    _add_data_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--calibration-samples", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("model-int8.mseg"))
    p.add_argument("--report", type=Path, default=None, help="write per-layer scales as JSON")

    p = commands.add_parser("infer", help="overlays and binary masks for images")
    p.add_argument("--model", type=Path, required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", type=Path, nargs="+", help="image files or directories")
    source.add_argument("--synthetic", type=int, default=None, metavar="N")
    p.add_argument("--center-crop", action="store_true", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out-dir", type=Path, default=Path("predictions"))

    p = commands.add_parser("sweep", help="train, quantize and evaluate grid configurations")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--configs", default=None, help="comma-separated ids such as u4-dwconv2d-x1_4")
    p.add_argument("--layout", choices=["block", "per_conv"], default="block")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--calibration-samples", type=int, default=None)
    p.add_argument("--pareto", action="store_true", help="mark F1-vs-flash Pareto-optimal rows")
    p.add_argument("--plot", type=Path, default=None, help="write the trade-off plot to this PNG")
    p.add_argument("--out", type=Path, default=Path("sweep"), help="prefix for the CSV and JSON tables")

    p = commands.add_parser("synth", help="write a synthetic crack dataset directory")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("synthetic"))

    return parser


def _settings(args: argparse.Namespace) -> RunSettings:
    names = ["workdir", "seed", "learning_rate", "batch_size", "epochs", "augment", "threshold",
             "synthetic", "data", "center_crop", "input_size", "calibration_samples", "aggregation"]
    overrides: dict[str, Any] = {name: getattr(args, name, None) for name in names}
    if args.no_timestamp:
        overrides["timestamp"] = False
    return load_settings(args.config, overrides)


def _arch_config(args: argparse.Namespace, settings: RunSettings) -> ArchConfig:
    try:
        return ArchConfig(
            depth=args.depth,
            filter_scale=args.scale,
            conv_type=CONV_CHOICES[args.conv],
            separable_layout=args.layout,
            input_h=settings.input_size,
            input_w=settings.input_size,
            off_grid=args.off_grid,
        )
    except (ValidationError, ValueError, ZeroDivisionError) as e:
        raise UsageError(f"invalid grid point ({_grid_help()}):\n{e}") from e


def _load_samples(settings: RunSettings):
    size = (settings.input_size, settings.input_size)
    if settings.data is not None:
        return load_dataset(settings.resolve(settings.data), size, settings.center_crop, settings.threads)
    if settings.synthetic is not None:
        return synth_cracks(settings.synthetic, size, settings.seed)
    raise UsageError("pass --data DIR or --synthetic N")


def _train_config(settings: RunSettings, quiet: bool) -> TrainConfig:
    return TrainConfig(
        learning_rate=settings.learning_rate,
        batch_size=settings.batch_size,
        epochs=settings.epochs,
        augment=settings.augment,
        seed=settings.seed,
        threshold=settings.threshold,
        threads=settings.threads,
        progress=not quiet,
    )


def _stamp(settings: RunSettings, payload: dict[str, Any]) -> dict[str, Any]:
    if settings.timestamp:
        payload["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return payload


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def format_estimate(config: ArchConfig, est: ResourceEstimate) -> str:
    lines = [
        config.label,
        f"  Params:          {est.params:,}",
        f"  MACs:            {est.macs:,}",
        f"  Weight bytes:    {est.weight_bytes:,} (width {est.weight_width})",
        f"  Bias bytes:      {est.bias_bytes:,}",
        f"  Header bytes:    {est.header_bytes:,} (lower bound)",
        f"  Flash estimate:  {est.flash_bytes:,} B ({est.flash_bytes / 1024:,.1f} KiB)",
        f"  Peak RAM:        {est.peak_activation_bytes:,} B ({est.peak_activation_bytes / 1024:,.1f} KiB)",
    ]
    return "\n".join(lines)


def cmd_generate(args: argparse.Namespace, settings: RunSettings) -> int:
    config = _arch_config(args, settings)
    graph = build_graph(config)
    path = save_model(settings.resolve(args.out), FloatModel(graph, init_params(graph, seed=settings.seed)))
    print(f"Wrote {config.config_id} ({graph.param_count:,} params) to {path}")
    if args.estimate:
        print(format_estimate(config, estimate_resources(graph)))
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace, settings: RunSettings) -> int:
    if args.grid:
        table = grid_table(input_h=settings.input_size, input_w=settings.input_size,
                           separable_layout=args.layout)
        print(table.to_string(index=False))
        if args.out is not None:
            out = settings.resolve(args.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            table.to_csv(out, index=False)
        return EXIT_OK
    config = _arch_config(args, settings)
    est = estimate_resources(build_graph(config), weight_width=args.weight_width,
                             activation_width=args.weight_width)
    print(format_estimate(config, est))
    if args.out is not None:
        _write_json(settings.resolve(args.out), _stamp(settings, {
            "config_id": config.config_id, "estimate": est.model_dump(mode="json", exclude={"per_layer"}),
        }))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, settings: RunSettings) -> int:
    initial = None
    if args.model is not None:
        model = load_model(settings.resolve(args.model), precision="float")
        graph, initial = model.graph, model.params
    else:
        graph = build_graph(_arch_config(args, settings))
    splits = split(_load_samples(settings), seed=settings.seed)
    print(f"Training {graph.config.config_id} on {'/'.join(map(str, splits.sizes()))} train/val/test samples")
    result = train(graph, splits, _train_config(settings, args.quiet), initial=initial)

    out = save_model(settings.resolve(args.out), result.best_model(graph))
    history_path = settings.resolve(args.history)
    history_path.parent.mkdir(parents=True, exist_ok=True)
    result.history.to_csv(history_path, index=False)
    if args.plot is not None:
        plot_history(result.history, settings.resolve(args.plot), title=graph.config.label)
    best = result.history.iloc[result.best_epoch - 1]
    print(f"Best epoch {result.best_epoch}: val F1 {best['val_f1']:.4f}, val mIoU {best['val_miou']:.4f}")
    print(f"Wrote {out} and {history_path}")
    return EXIT_OK


def _select_split(splits, name: str):
    if name == "all":
        return splits.train + splits.val + splits.test
    return getattr(splits, name)


def cmd_eval(args: argparse.Namespace, settings: RunSettings) -> int:
    models = [(path, load_model(settings.resolve(path))) for path in args.model]
    samples = _select_split(split(_load_samples(settings), seed=settings.seed), args.split)
    if not samples:
        raise DatasetError(f"the {args.split} split is empty")
    images, masks = stack(samples)
    names = [s.name for s in samples]

    rows, records, tables = [], [], []
    for path, model in models:
        int8 = isinstance(model, QuantizedModel)
        precision = "int8" if int8 else "float32"
        probs = predict(model, images, threads=settings.threads)
        table = per_image_confusion(probs, masks, settings.threshold, names)
        record = metrics_from_table(table, settings.aggregation)
        width = 1 if int8 else 4
        est = estimate_resources(model.graph, weight_width=width, activation_width=width)
        rows.append({
            "config_id": model.graph.config.config_id,
            "precision_mode": precision,
            "params": est.params,
            "precision": record.precision,
            "recall": record.recall,
            "f1": record.f1,
            "miou": record.miou,
            "flash_bytes": est.flash_bytes,
            "peak_ram_bytes": est.peak_activation_bytes,
            "macs": est.macs,
        })
        records.append({"model": str(path), "precision_mode": precision, **record.model_dump(mode="json")})
        tables.append((precision, table))

    prefix = settings.resolve(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    summary = pd.DataFrame(rows)
    summary.to_csv(f"{prefix}.csv", index=False)
    for index, (precision, table) in enumerate(tables):
        table.to_csv(f"{prefix}-{index}-{precision}-per_image.csv", index=False)
    _write_json(Path(f"{prefix}.json"), _stamp(settings, {
        "split": args.split, "threshold": settings.threshold, "records": records,
    }))
    print(summary.to_string(index=False))
    return EXIT_OK


def cmd_quantize(args: argparse.Namespace, settings: RunSettings) -> int:
    model = load_model(settings.resolve(args.model), precision="float")
    splits = split(_load_samples(settings), seed=settings.seed)
    calibration = (splits.val or splits.train)[:settings.calibration_samples]
    images, _ = stack(calibration)
    ranges = calibrate(model.graph, model.params, [images])
    qm = quantize_model(model.graph, model.params, ranges)
    out = save_model(settings.resolve(args.out), qm)
    est = estimate_resources(model.graph, weight_width=1, activation_width=1)
    print(f"Quantized {model.graph.config.config_id} on {len(calibration)} calibration samples")
    print(f"  Payload: {qm.weight_payload_bytes():,} B, flash estimate {est.flash_bytes:,} B, "
          f"file {out.stat().st_size:,} B")
    if qm.degenerate_edges:
        print(f"Warning: collapsed activation ranges at {', '.join(qm.degenerate_edges)}")
    if args.report is not None:
        _write_json(settings.resolve(args.report), _stamp(settings, quantization_report(qm)))
    return EXIT_OK


def cmd_infer(args: argparse.Namespace, settings: RunSettings) -> int:
    model = load_model(settings.resolve(args.model))
    cfg = model.graph.config
    size = (cfg.input_h, cfg.input_w)
    if args.input:
        named = load_images([settings.resolve(p) for p in args.input], size, settings.center_crop)
    else:
        named = [(s.name, s.image) for s in synth_cracks(args.synthetic, size, settings.seed)]
    images = np.stack([image for _, image in named])
    probs = predict(model, images, threads=settings.threads)

    out_dir = settings.resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for (name, image), prob in zip(named, probs):
        mask = prob[..., 0] >= settings.threshold
        write_overlay(out_dir / f"{name}-overlay.ppm", image, mask)
        write_mask(out_dir / f"{name}-mask.pgm", mask)
    print(f"Wrote {len(named)} overlays and masks to {out_dir}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, settings: RunSettings) -> int:
    overrides = {"input_h": settings.input_size, "input_w": settings.input_size, "separable_layout": args.layout}
    if args.configs:
        try:
            configs = [parse_config_id(c, **overrides) for c in args.configs.split(",") if c.strip()]
        except (ValidationError, ValueError) as e:
            raise UsageError(f"bad --configs ({_grid_help()}): {e}") from e
        configs.sort(key=grid_position)
    else:
        configs = enumerate_grid(**overrides)
    splits = split(_load_samples(settings), seed=settings.seed)
    rows = run_sweep(configs, splits, _train_config(settings, args.quiet), settings.calibration_samples,
                     settings.threshold, threads=settings.threads, progress=not args.quiet)

    table = create_sweep_table(rows)
    note = None
    if args.pareto:
        table = mark_pareto(table)
        note = divergence_note(table)
    prefix = settings.resolve(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(f"{prefix}.csv", index=False)
    _write_json(Path(f"{prefix}.json"), _stamp(settings, {
        "rows": json.loads(table.to_json(orient="records")), "note": note,
    }))
    if args.plot is not None:
        plot_tradeoff(table, settings.resolve(args.plot))
    print(format_table_text(table))
    if note:
        print(note)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, settings: RunSettings) -> int:
    samples = synth_cracks(args.count, (settings.input_size, settings.input_size), settings.seed)
    root = save_dataset(samples, settings.resolve(args.out))
    print(f"Wrote {len(samples)} synthetic samples to {root}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "estimate": cmd_estimate,
    "train": cmd_train,
    "eval": cmd_eval,
    "quantize": cmd_quantize,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        settings = _settings(args)
        logger.debug("settings: %s", settings.model_dump(mode="json"))
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PrecisionMismatchError as e:
        print(f"precision mismatch: {e}", file=sys.stderr)
        return EXIT_PRECISION
    except ShapeMismatchError as e:
        print(f"shape mismatch: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericDivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ModelFormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
