"""Command-line entry point.

Subcommands mirror the pipeline: ``synth`` (write a synthetic dataset),
``modularize`` (featured-batch caches), ``train``, ``evaluate`` and ``wheel``.
All outputs go below ``--out``. Exit codes: 0 success, 2 config error,
3 data error, 4 training incomplete, 5 evaluation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import dataset, evaluation, training
from .dataset import ConfigError, DataError
from .features import CATALOG, MODEL_PRESETS, export_catalog, feature_by_name
from .voting import FeaturedModel, PartialModelError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5

ARCH_PRESETS = {"h1": (256,), "h2": (256, 77)}


class EvalFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    label_count: int | None = None
    k: int = 1
    r: int = 1
    features: list[str] = field(default_factory=lambda: [f.name for f in CATALOG])
    model: int | None = None
    arch: str = "h1"
    mode: str = "T"
    sgd: dict = field(default_factory=dict)
    gdt: dict = field(default_factory=dict)
    protocol_m: int = 1
    out: str = "run"
    seed: int = 0
    workers: int = 1
    split_seed: int | None = None
    eval_batches: int = 10
    decimals: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def validate(self) -> None:
        if self.k < 1 or self.r < 1:
            raise ConfigError("k and r must be >= 1")
        if self.label_count is not None and self.label_count % self.k:
            raise ConfigError(f"k={self.k} does not divide L={self.label_count}")
        if self.arch not in ARCH_PRESETS:
            raise ConfigError(f"arch must be one of {sorted(ARCH_PRESETS)}")
        if self.mode not in training.MODES:
            raise ConfigError(f"mode must be one of {training.MODES}")
        if self.protocol_m not in (1, 3):
            raise ConfigError("protocol m must be 1 or 3")
        if self.label_count is not None and self.protocol_m > self.label_count // self.k:
            raise ConfigError(f"protocol m={self.protocol_m} exceeds labels per module {self.label_count // self.k}")
        if self.model is not None and self.model not in MODEL_PRESETS:
            raise ConfigError("model preset must be 1..6")
        if self.model is not None and MODEL_PRESETS[self.model] > len(self.features):
            raise ConfigError(f"Model-{self.model} needs {MODEL_PRESETS[self.model]} features, {len(self.features)} configured")
        if self.workers < 1 or self.eval_batches < 1 or self.decimals < 1:
            raise ConfigError("workers, eval_batches and decimals must be >= 1")
        if not self.features:
            raise ConfigError("at least one feature is required")
        for name in self.features:
            try:
                feature_by_name(name)
            except KeyError as exc:
                raise ConfigError(str(exc)) from exc
        try:
            training.SgdConfig(**self.sgd)
            training.GdtConfig(**self.gdt)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad optimizer settings: {exc}") from exc

    @property
    def feature_specs(self):
        return [feature_by_name(n) for n in self.features]

    @property
    def p(self) -> int:
        return MODEL_PRESETS[self.model] if self.model is not None else len(self.features)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _cell_name(cell) -> str:
    i, j, s = cell
    return f"f{i:02d}_m{j:03d}_s{s:02d}"


def _load_dataset(cfg: RunConfig) -> dataset.LabeledDataset:
    if not cfg.dataset:
        raise ConfigError("no dataset path configured")
    try:
        return dataset.load_dataset(cfg.dataset, cfg.label_count)
    except OSError as exc:
        raise DataError(str(exc)) from exc


def cmd_synth(cfg: RunConfig, args) -> int:
    ds = dataset.synthetic_dataset(
        args.labels, args.per_label, args.size, cfg.seed, args.noise, args.separation
    )
    path = Path(cfg.dataset or cfg.out_dir / "synthetic.fnb")
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.write_tensor_file(ds, path)
    print(f"wrote {len(ds)} images to {path}")
    return EXIT_OK


def cmd_modularize(cfg: RunConfig, args=None) -> int:
    ds = _load_dataset(cfg)
    if ds.label_count % cfg.k:
        raise ConfigError(f"k={cfg.k} does not divide L={ds.label_count}")
    subsets = dataset.submodule_subsets(ds, cfg.k, cfg.r, cfg.split_seed)
    cache = cfg.out_dir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    cells = []
    for (j, s), piece in subsets.items():
        for i, spec in enumerate(cfg.feature_specs, start=1):
            fb = dataset.materialize_featured_batch(piece, spec, cfg.k, i, j, s)
            name = f"{_cell_name((i, j, s))}.fvb"
            dataset.write_featured_cache(fb, cache / name)
            cells.append({"cell": [i, j, s], "file": name, "ids": list(piece.ids)})
    manifest = {
        "features": cfg.features,
        "k": cfg.k,
        "r": cfg.r,
        "label_count": ds.label_count,
        "cells": sorted(cells, key=lambda c: c["cell"]),
    }
    _write_text(cache / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(cells)} featured-batch caches to {cache}")
    return EXIT_OK


def _load_caches(cfg: RunConfig):
    cache = cfg.out_dir / "cache"
    path = cache / "manifest.json"
    if not path.exists():
        raise DataError(f"{path} missing; run modularize first")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    batches = {}
    for entry in manifest["cells"]:
        i, j, s = entry["cell"]
        batches[(i, j, s)] = dataset.read_featured_cache(cache / entry["file"], i, j, s, entry["ids"])
    return manifest, batches


def cmd_train(cfg: RunConfig, args=None) -> int:
    manifest, batches = _load_caches(cfg)
    features = [feature_by_name(n) for n in manifest["features"]]
    dim = next(iter(batches.values())).inputs.shape[1]
    arch = training.hidden_arch(dim, ARCH_PRESETS[cfg.arch], manifest["label_count"] // manifest["k"])
    cells = training.train_cells(
        batches,
        arch,
        cfg.mode,
        training.SgdConfig(**cfg.sgd),
        training.GdtConfig(**cfg.gdt),
        cfg.seed,
        cfg.workers,
    )
    catalog = {c: res.params for c, res in cells.items() if res.completed}
    pm = training.ProtoModel(
        cfg.mode, arch, features, manifest["k"], manifest["r"], manifest["label_count"], catalog, cells
    )
    training.save_proto_model(pm, cfg.out_dir / "model", cfg.decimals)
    failed = [c for c, res in cells.items() if not res.completed]
    statuses = {}
    for res in cells.values():
        statuses[res.status] = statuses.get(res.status, 0) + 1
    print(f"trained {len(catalog)}/{len(cells)} cells: " + ", ".join(f"{k}={v}" for k, v in sorted(statuses.items())))
    if failed:
        print(f"training incomplete for cells {failed}", file=sys.stderr)
        return EXIT_TRAIN
    return EXIT_OK


def _load_model(cfg: RunConfig) -> training.ProtoModel:
    try:
        return training.load_proto_model(cfg.out_dir / "model")
    except (OSError, KeyError, ValueError) as exc:
        raise EvalFailure(f"cannot load model: {exc}") from exc


def cmd_evaluate(cfg: RunConfig, args) -> int:
    pm = _load_model(cfg)
    reports = cfg.out_dir / "reports"
    if args.scope == "training":
        _, batches = _load_caches(cfg)
        table = evaluation.training_evaluation(pm, batches)
        values = {"proto_model": pm.tag, **table.as_report()}
        for cell in sorted(table.accuracies):
            values[f"accuracy.{_cell_name(cell)}"] = f"{table.accuracies[cell]:.3f}"
        _write_text(reports / "training_eval.txt", evaluation.format_report(values))
        print(evaluation.format_report(values), end="")
        return EXIT_OK

    ds = _load_dataset(cfg)
    if cfg.p > pm.n:
        raise ConfigError(f"model uses {cfg.p} features but the proto-model has {pm.n}")
    if ds.label_count != pm.label_count:
        raise ConfigError("dataset label count differs from the proto-model")
    fm = FeaturedModel(pm, cfg.p)
    result = evaluation.model_evaluation(fm, ds, cfg.protocol_m)
    pos = {sid: t for t, sid in enumerate(ds.ids)}
    matrices = []
    for part in dataset.partition_eval_batches(ds, min(cfg.eval_batches, len(ds))):
        idx = [pos[sid] for sid in part.ids]
        matrices.append(evaluation.confusion_matrix(result.predicted[idx], result.true[idx], ds.label_count))
    values = {"proto_model": pm.tag, **evaluation.model_eval_report(result, matrices, cfg.protocol_m, cfg.p)}
    stem = f"model_p{cfg.p:02d}_m{cfg.protocol_m}"
    _write_text(reports / f"{stem}_eval.txt", evaluation.format_report(values))
    total = evaluation.confusion_matrix(result.predicted, result.true, ds.label_count)
    _write_text(reports / f"{stem}_confusion.csv", evaluation.format_confusion_csv(total))
    print(evaluation.format_report(values), end="")
    return EXIT_OK


def _parse_cell(text: str, pm: training.ProtoModel) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("cell must be FEATURE,MODULE,SUBMODULE")
    feat = parts[0].strip()
    if feat.isdigit():
        i = int(feat)
    else:
        names = [f.name for f in pm.features]
        if feat not in names:
            raise ConfigError(f"unknown feature {feat!r}")
        i = names.index(feat) + 1
    try:
        cell = (i, int(parts[1]), int(parts[2]))
    except ValueError as exc:
        raise ConfigError(f"bad cell {text!r}") from exc
    if cell not in pm.catalog:
        raise ConfigError(f"no trained FNN for cell {cell}")
    return cell


def cmd_wheel(cfg: RunConfig, args) -> int:
    pm = _load_model(cfg)
    cell = _parse_cell(args.cell, pm)
    _, batches = _load_caches(cfg)
    plot, svg = evaluation.confusion_wheel(pm.catalog[cell], batches[cell])
    title = f"{pm.tag} N{cell} feature {pm.features[cell[0] - 1].name}"
    svg = evaluation.render_wheel_svg(plot, title)
    out = cfg.out_dir / "wheel"
    _write_text(out / f"{_cell_name(cell)}.svg", svg)
    _write_text(out / f"{_cell_name(cell)}.csv", evaluation.format_wheel_csv(plot))
    print(
        f"wheel for {cell}: {int(plot.misclassified.sum())} misclassified, "
        f"{int(plot.outside_sector.sum())} outside sector"
    )
    return EXIT_OK


def cmd_catalog(cfg: RunConfig, args) -> int:
    print(export_catalog(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--mode", choices=training.MODES)
    common.add_argument("--model", type=int, choices=sorted(MODEL_PRESETS))
    common.add_argument("--protocol-m", type=int, choices=(1, 3))
    common.add_argument("--workers", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="featfnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    synth = sub.add_parser("synth", parents=[common], help="write a synthetic FNB1 dataset")
    synth.add_argument("--labels", type=int, default=4)
    synth.add_argument("--per-label", type=int, default=50)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--noise", type=float, default=60.0)
    synth.add_argument("--separation", type=float, default=0.02)
    synth.set_defaults(func=cmd_synth)
    sub.add_parser("modularize", parents=[common], help="write featured-batch caches").set_defaults(func=cmd_modularize)
    sub.add_parser("train", parents=[common], help="train a proto-model").set_defaults(func=cmd_train)
    ev = sub.add_parser("evaluate", parents=[common], help="training or model evaluation")
    ev.add_argument("--scope", choices=("training", "model"), default="model")
    ev.set_defaults(func=cmd_evaluate)
    wheel = sub.add_parser("wheel", parents=[common], help="render a confusion wheel")
    wheel.add_argument("--cell", required=True, help="FEATURE,MODULE,SUBMODULE (feature by name or index)")
    wheel.set_defaults(func=cmd_wheel)
    sub.add_parser("catalog", parents=[common], help="print the feature catalog").set_defaults(func=cmd_catalog)
    return parser


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {
        "mode": args.mode,
        "model": args.model,
        "protocol_m": args.protocol_m,
        "workers": args.workers,
        "seed": args.seed,
        "out": args.out,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EvalFailure, PartialModelError, evaluation.EvaluationError) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
