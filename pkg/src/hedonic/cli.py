"""Command-line entry point.

One JSON run config drives all subcommands; flags override config values.
Every command prints machine-readable JSON on stdout and a single-line
reason on stderr when it fails. Exit codes: 0 ok, 1 usage/config, 2 data,
3 training/numerical, 4 network.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from . import models as models_mod
from . import synth as synth_mod
from . import tiles as tiles_mod
from . import training as training_mod
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    TileError,
    TrainingError,
)
from .explain import OcclusionSpec, occlusion_sweep, render_heatmap_overlay, save_overlay_png

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3
EXIT_NETWORK = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


@dataclass
class RunConfig:
    csv: Path
    image_dir: Path | None = None
    cache_dir: Path | None = None
    out_dir: Path = Path("out")
    numeric_features: list = field(default_factory=list)
    categorical_features: list = field(default_factory=list)
    seed: int = 42
    split_ratios: tuple = (0.7, 0.15, 0.15)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    occlusion: dict = field(default_factory=dict)
    tiles: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if "csv" not in raw:
            raise ConfigError(f"config {path}: missing required key 'csv'")
        base = path.parent

        def resolve(p):
            return base / p if p is not None and not Path(p).is_absolute() else (
                Path(p) if p is not None else None)

        cfg = cls(
            csv=resolve(raw["csv"]),
            image_dir=resolve(raw.get("image_dir")),
            cache_dir=resolve(raw.get("cache_dir")),
            out_dir=resolve(raw.get("out_dir", "out")),
            numeric_features=list(raw.get("numeric_features", [])),
            categorical_features=list(raw.get("categorical_features", [])),
            seed=int(raw.get("seed", 42)),
            split_ratios=tuple(raw.get("split_ratios", (0.7, 0.15, 0.15))),
            model=dict(raw.get("model", {})),
            training=dict(raw.get("training", {})),
            occlusion=dict(raw.get("occlusion", {})),
            tiles=dict(raw.get("tiles", {})),
        )
        if not cfg.csv.exists():
            raise ConfigError(f"config {path}: csv not found at {cfg.csv}")
        return cfg


def _load_records(cfg: RunConfig):
    report = data_mod.load_tabular_csv(cfg.csv, cfg.numeric_features, cfg.categorical_features)
    if not report.records:
        raise DataError(f"{cfg.csv}: no valid records ({report.n_rejected} rejected)")
    return report.records


def _split_records(cfg: RunConfig, records):
    split = data_mod.split_dataset([r.id for r in records], cfg.seed, cfg.split_ratios)
    by_id = {r.id: r for r in records}
    return {name: [by_id[i] for i in getattr(split, name)] for name in ("train", "val", "test")}


def _model_config(cfg: RunConfig, kind: str, tabular_dim: int) -> models_mod.ModelConfig:
    raw = dict(cfg.model)
    raw.pop("kind", None)
    raw.pop("tabular_dim", None)
    mc = models_mod.ModelConfig.from_dict({"kind": kind, "tabular_dim": tabular_dim, **raw})
    mc.validate()
    return mc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"spec file not found: {spec_path}")
    spec = synth_mod.SynthSpec.from_dict(json.loads(spec_path.read_text(encoding="utf-8")))
    if args.seed is not None:
        spec.seed = args.seed
    ds = synth_mod.generate_synthetic_dataset(spec)
    summary = synth_mod.write_dataset(ds, args.out)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_fetch_tiles(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if cfg.image_dir is None:
        raise ConfigError("fetch-tiles requires 'image_dir' in the config")
    tile_raw = dict(cfg.tiles)
    if "tile_url_template" not in tile_raw:
        raise ConfigError("fetch-tiles requires tiles.tile_url_template in the config")
    zoom = int(tile_raw.pop("zoom", 16))
    extent_m = float(tile_raw.pop("extent_m", 600.0))
    out_size = int(tile_raw.pop("out_size", 256))
    tile_raw.setdefault("cache_dir", str(cfg.cache_dir or (cfg.out_dir / "tile-cache")))
    client = tiles_mod.TileClient(tiles_mod.TileClientConfig.from_dict(tile_raw))
    records = _load_records(cfg)
    cfg.image_dir.mkdir(parents=True, exist_ok=True)
    fetched = skipped = 0
    for rec in records:
        target = cfg.image_dir / f"{rec.id}.png"
        if target.exists():
            skipped += 1
            continue
        patch = tiles_mod.compose_patch(rec.lat, rec.lon, client, zoom=zoom,
                                        extent_m=extent_m, out_size=out_size)
        arr = np.clip(np.round(patch * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(target)
        fetched += 1
    print(json.dumps({"fetched": fetched, "skipped": skipped,
                      "network_calls": client.network_calls}))
    return EXIT_OK


def _prepare_training_data(cfg: RunConfig, kind: str):
    records = _load_records(cfg)
    splits = _split_records(cfg, records)
    schema = data_mod.fit_normalizer(splits["train"], cfg.numeric_features,
                                     cfg.categorical_features)
    with_images = kind == "fusion"
    image_size = int(cfg.model.get("image_size", 64))
    if with_images:
        train_paths = [data_mod.resolve_image_path(r, cfg.image_dir) for r in splits["train"]]
        schema.image_mean, schema.image_std = data_mod.fit_image_stats(train_paths)
    arrays = {
        name: data_mod.build_arrays(recs, schema, image_dir=cfg.image_dir,
                                    image_size=image_size, with_images=with_images)
        for name, recs in splits.items()
    }
    return schema, arrays, image_size


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    kind = args.model
    schema, arrays, image_size = _prepare_training_data(cfg, kind)
    mc = _model_config(cfg, kind, schema.dim)
    model = models_mod.build_model(mc, cfg.seed, schema)

    if kind == "linreg":
        model.fit(arrays["train"].x, arrays["train"].y)
        report = training_mod.TrainReport(stopping_reason="closed_form", best_epoch=0)
        val_mae = training_mod.evaluate_metrics(model, arrays["val"]).mae
        report.history.append(training_mod.EpochStat(0, 0.0, val_mae))
    else:
        tc = training_mod.TrainingConfig.from_dict({"seed": cfg.seed, **cfg.training})
        report = training_mod.train(model, arrays["train"], arrays["val"], tc)

    out = Path(args.out)
    models_mod.save_checkpoint(model, out)
    report_path = Path(str(out) + ".jsonl")
    report.to_jsonl(report_path)
    print(json.dumps({
        "checkpoint": str(out),
        "report": str(report_path),
        "best_epoch": report.best_epoch,
        "best_val_mae": report.best_val_mae,
        "stopping_reason": report.stopping_reason,
        "n_params": model.n_params,
    }))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = RunConfig.from_file(args.config)
    model = models_mod.load_checkpoint(args.ckpt)
    if model.schema is None:
        raise DataError(f"{args.ckpt}: checkpoint has no feature schema")
    records = _load_records(cfg)
    splits = _split_records(cfg, records)
    recs = splits[args.split]
    if not recs:
        raise DataError(f"split '{args.split}' is empty")
    ds = data_mod.build_arrays(recs, model.schema, image_dir=cfg.image_dir,
                               image_size=model.config.image_size,
                               with_images=model.kind == "fusion")
    metrics = training_mod.evaluate_metrics(model, ds)
    print(json.dumps(metrics.as_dict()))
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = RunConfig.from_file(args.config)
    model = models_mod.load_checkpoint(args.ckpt)
    if model.kind != "fusion":
        raise ConfigError(f"explain requires a fusion checkpoint, got '{model.kind}'")
    records = _load_records(cfg)
    rec = next((r for r in records if r.id == args.id), None)
    if rec is None:
        raise DataError(f"record id '{args.id}' not found in {cfg.csv}")
    schema = model.schema
    img_path = data_mod.resolve_image_path(rec, cfg.image_dir)
    size = model.config.image_size
    image = data_mod.load_image_patch(img_path, size, schema.image_mean, schema.image_std)
    display = data_mod.load_image_patch(img_path, size)
    tab = data_mod.apply_normalizer(schema, rec)

    occ = dict(cfg.occlusion)
    if args.window is not None:
        occ["window"] = args.window
    if args.stride is not None:
        occ["stride"] = args.stride
    spec = OcclusionSpec.from_dict(occ)
    heatmap = occlusion_sweep(model, image, tab, spec)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    png_path = cfg.out_dir / f"{rec.id}_heatmap.png"
    json_path = cfg.out_dir / f"{rec.id}_heatmap.json"
    save_overlay_png(render_heatmap_overlay(display, heatmap), png_path)
    heatmap.save_json(json_path)
    print(json.dumps({"png": str(png_path), "json": str(json_path),
                      "base_prediction": heatmap.base_prediction}))
    return EXIT_OK


def cmd_compare(args) -> int:
    def read_metrics(p):
        path = Path(p)
        if not path.exists():
            raise DataError(f"metrics file not found: {path}")
        return training_mod.Metrics.from_dict(json.loads(path.read_text(encoding="utf-8")))

    reductions = training_mod.compare_models(read_metrics(args.baseline),
                                             read_metrics(args.challenger))
    print(json.dumps(reductions))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="hedonic",
                     description="Property valuation from tabular and satellite image data.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synthetic spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fetch-tiles", help="download and compose patches for every record")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.set_defaults(func=cmd_fetch_tiles)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True, choices=models_mod.MODEL_KINDS)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="print metrics JSON for one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="write an occlusion heatmap for one record")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--id", required=True, help="record id")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("compare", help="per-metric percent reductions, baseline vs challenger")
    p.add_argument("--baseline", required=True, help="baseline metrics JSON file")
    p.add_argument("--challenger", required=True, help="challenger metrics JSON file")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help prints and exits 0
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except TileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NETWORK


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
