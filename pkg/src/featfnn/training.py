"""Per-cell FNN training: SGD to a threshold, then gradient-descent tunneling.

Tunneling here is an error-focused reweighting homotopy. At stage ``lam`` in
``[0, 1]`` the objective is::

    sum_correct loss_t + (1 + lam * beta) * sum_misclassified loss_t

A block of gradient steps on that objective is accepted only when the number
of misclassified samples does not grow; otherwise it is rolled back and the
step size halved. ``lam`` ramps up by ``dlambda`` per accepted block. Once at
``lam = 1`` with ``patience`` accepted blocks and no progress, ``lam`` is reset
to 0 around the new error set and a fresh tunnel starts.
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fnn
from .dataset import ConflictReport, FeaturedBatch, LabeledDataset, build_featured_batches, scan_double_labels
from .features import FeatureSpec, feature_by_name
from .fnn import FnnArch, FnnParams


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, rate: float, reason: str = "non-finite loss"):
        super().__init__(f"{reason} at epoch {epoch} (learning rate {rate:g})")
        self.epoch = epoch
        self.rate = rate


@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    decay: float = 0.5
    decay_every: int = 50
    batch_size: int = 16
    max_epochs: int = 200
    threshold: float = 0.98
    seed: int = 0
    # Divergence guard: accuracy below chance minus this after 10% of the budget.
    chance_margin: float = 0.05
    continue_fraction: float = 0.25

    def __post_init__(self):
        if self.learning_rate <= 0 or self.decay <= 0:
            raise ValueError("learning rate and decay must be positive")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if self.batch_size < 1 or self.decay_every < 1 or self.max_epochs < 0:
            raise ValueError("batch size, decay interval and epochs must be positive")

    def rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay ** (epoch // self.decay_every)


@dataclass
class GdtConfig:
    dlambda: float = 0.25
    inner_steps: int = 10
    learning_rate: float = 0.05
    beta: float = 20.0
    patience: int = 10
    max_tunnels: int = 20
    max_blocks: int = 5000
    time_budget: float = 300.0
    min_learning_rate: float = 1e-6
    scan_decimals: int = 4

    def __post_init__(self):
        if not 0 < self.dlambda <= 1:
            raise ValueError("dlambda must lie in (0, 1]")
        if self.patience < 1 or self.inner_steps < 1:
            raise ValueError("patience and inner steps must be >= 1")
        if self.beta <= 0 or self.learning_rate <= 0:
            raise ValueError("beta and learning rate must be positive")


ERROR_FREE = "ErrorFree"
INCONSISTENT = "Inconsistent"
STALLED = "Stalled"


@dataclass
class TunnelResult:
    params: FnnParams
    status: str
    errors: int
    trace: list[int]
    blocks: int = 0
    conflicts: ConflictReport | None = None


def _axpy(p: FnnParams, g: FnnParams, step: float) -> None:
    for w, gw in zip(p.weights, g.weights):
        w -= step * gw
    for b, gb in zip(p.biases, g.biases):
        b -= step * gb


def _errors(p: FnnParams, x, y) -> np.ndarray:
    return fnn.predict(p, x) != y


def sgd_epoch(p: FnnParams, x, y, rate: float, batch_size: int, rng: np.random.Generator) -> None:
    order = rng.permutation(len(y))
    for start in range(0, len(y), batch_size):
        idx = order[start:start + batch_size]
        _axpy(p, fnn.grad(p, x[idx], y[idx]), rate)


def _check_finite(p: FnnParams, x, y, epoch: int, rate: float) -> None:
    if not math.isfinite(fnn.mean_loss(p, x, y)):
        raise DivergenceError(epoch, rate)


def sgd_train(
    arch: FnnArch, fb: FeaturedBatch, cfg: SgdConfig, init: FnnParams | None = None
) -> tuple[FnnParams, list[float]]:
    """Minibatch SGD until full-batch training accuracy reaches ``cfg.threshold``.

    Returns the parameters and the per-epoch accuracy trace.
    """
    if len(fb) == 0:
        raise ValueError("sgd_train needs a non-empty batch")
    x, y = np.asarray(fb.inputs, dtype=np.float64), np.asarray(fb.labels)
    rng = np.random.default_rng(cfg.seed)
    p = init.copy() if init is not None else fnn.init_params(arch, rng)
    chance = 1.0 / arch.n_outputs
    check_at = max(1, int(math.ceil(0.1 * cfg.max_epochs)))
    trace: list[float] = []
    for epoch in range(cfg.max_epochs):
        rate = cfg.rate_at(epoch)
        with np.errstate(over="ignore", invalid="ignore"):
            sgd_epoch(p, x, y, rate, cfg.batch_size, rng)
            _check_finite(p, x, y, epoch, rate)
        acc = fnn.accuracy(p, x, y)
        trace.append(acc)
        if acc >= cfg.threshold:
            break
        if epoch + 1 == check_at and acc < chance - cfg.chance_margin:
            raise DivergenceError(epoch, rate, f"accuracy {acc:.3f} below chance")
    return p, trace


def sgd_continue(p: FnnParams, fb: FeaturedBatch, cfg: SgdConfig, epochs: int | None = None) -> FnnParams:
    """Keep training without the threshold stop; return the best-accuracy iterate."""
    epochs = cfg.max_epochs if epochs is None else epochs
    x, y = np.asarray(fb.inputs, dtype=np.float64), np.asarray(fb.labels)
    if x.shape[1:] != (p.arch.n_inputs,):
        raise fnn.DimensionError("batch does not fit parameters")
    rng = np.random.default_rng(cfg.seed)
    best, best_acc = p.copy(), fnn.accuracy(p, x, y)
    cur = p.copy()
    for epoch in range(epochs):
        rate = cfg.rate_at(epoch)
        with np.errstate(over="ignore", invalid="ignore"):
            sgd_epoch(cur, x, y, rate, cfg.batch_size, rng)
            _check_finite(cur, x, y, epoch, rate)
        acc = fnn.accuracy(cur, x, y)
        if acc > best_acc:
            best, best_acc = cur.copy(), acc
    return best


def gdt_tunnel(p: FnnParams, fb: FeaturedBatch, cfg: GdtConfig) -> TunnelResult:
    x, y = np.asarray(fb.inputs, dtype=np.float64), np.asarray(fb.labels)
    if x.ndim != 2 or x.shape[1] != p.arch.n_inputs:
        raise fnn.DimensionError(f"batch inputs {x.shape} do not fit arch {p.arch.tag}")
    wrong = _errors(p, x, y)
    errors = int(wrong.sum())
    conflicts = scan_double_labels(fb, cfg.scan_decimals)
    if conflicts:
        return TunnelResult(p.copy(), INCONSISTENT, errors, [errors], 0, conflicts)
    cur = p.copy()
    trace = [errors]
    if errors == 0:
        return TunnelResult(cur, ERROR_FREE, 0, trace)

    deadline = time.monotonic() + cfg.time_budget
    lam, rate, stall, tunnels, blocks = 0.0, cfg.learning_rate, 0, 0, 0
    while blocks < cfg.max_blocks and time.monotonic() < deadline:
        blocks += 1
        weights = np.where(wrong, 1.0 + lam * cfg.beta, 1.0)
        cand = cur.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(cfg.inner_steps):
                _axpy(cand, fnn.grad(cand, x, y, weights), rate)
            cand_wrong = _errors(cand, x, y)
            finite = math.isfinite(fnn.mean_loss(cand, x, y))
        cand_errors = int(cand_wrong.sum())
        if not finite or cand_errors > errors:
            rate /= 2.0
            if rate < cfg.min_learning_rate:
                rate = cfg.learning_rate
                stall += 1
            continue
        improved = cand_errors < errors
        cur, wrong, errors = cand, cand_wrong, cand_errors
        trace.append(errors)
        if errors == 0:
            return TunnelResult(cur, ERROR_FREE, 0, trace, blocks)
        stall = 0 if improved else stall + 1
        if lam < 1.0:
            lam = min(1.0, lam + cfg.dlambda)
        elif stall >= cfg.patience:
            tunnels += 1
            if tunnels > cfg.max_tunnels:
                break
            lam, stall, rate = 0.0, 0, cfg.learning_rate
    return TunnelResult(cur, STALLED, errors, trace, blocks)


# -- proto-models -------------------------------------------------------------

MODES = ("S", "S'", "T")


@dataclass
class CellResult:
    params: FnnParams | None
    completed: bool
    accuracy: float | None = None
    sgd_accuracy: float | None = None
    status: str = ""
    message: str = ""
    conflicts: list = field(default_factory=list)
    # misclassification counts per accepted GDT block (mode T only)
    error_trace: list = field(default_factory=list)


@dataclass
class ProtoModel:
    mode: str
    arch: FnnArch
    features: list[FeatureSpec]
    k: int
    r: int
    label_count: int
    catalog: dict[tuple[int, int, int], FnnParams]
    cells: dict[tuple[int, int, int], CellResult] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def tag(self) -> str:
        return f"{self.mode}_h{len(self.arch.sizes) - 2}"

    @property
    def partial(self) -> bool:
        return len(self.catalog) != self.n * self.k * self.r

    def cell_keys(self):
        return [
            (i, j, s)
            for i in range(1, self.n + 1)
            for j in range(1, self.k + 1)
            for s in range(1, self.r + 1)
        ]


def cell_seed(seed: int, cell: tuple[int, int, int]) -> int:
    return int(np.random.SeedSequence([seed, *cell]).generate_state(1)[0])


def train_cell(arch: FnnArch, fb: FeaturedBatch, mode: str, sgd_cfg: SgdConfig, gdt_cfg: GdtConfig) -> CellResult:
    """Train one FNN on its featured batch according to ``mode``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    try:
        params, trace = sgd_train(arch, fb, sgd_cfg)
        sgd_acc = fnn.accuracy(params, fb.inputs, fb.labels)
        status, conflicts, error_trace = "SGD", [], []
        if mode == "S'":
            extra = int(math.ceil(sgd_cfg.continue_fraction * sgd_cfg.max_epochs))
            params = sgd_continue(params, fb, sgd_cfg, extra)
        elif mode == "T":
            result = gdt_tunnel(params, fb, gdt_cfg)
            params, status, error_trace = result.params, result.status, result.trace
            if result.conflicts:
                conflicts = [list(c.ids) for c in result.conflicts.conflicts]
    except DivergenceError as exc:
        return CellResult(None, False, status="Failed", message=str(exc))
    acc = fnn.accuracy(params, fb.inputs, fb.labels)
    return CellResult(params, True, acc, sgd_acc, status, conflicts=conflicts, error_trace=error_trace)


def _train_cell_job(job):
    cell, arch, fb, mode, sgd_cfg, gdt_cfg = job
    return cell, train_cell(arch, fb, mode, sgd_cfg, gdt_cfg)


def train_cells(
    batches: dict[tuple[int, int, int], FeaturedBatch],
    arch: FnnArch,
    mode: str,
    sgd_cfg: SgdConfig,
    gdt_cfg: GdtConfig,
    seed: int = 0,
    workers: int = 1,
) -> dict[tuple[int, int, int], CellResult]:
    """Train every cell independently; results keyed and ordered by cell index."""
    jobs = []
    for cell in sorted(batches):
        cfg = SgdConfig(**{**asdict(sgd_cfg), "seed": cell_seed(seed, cell)})
        jobs.append((cell, arch, batches[cell], mode, cfg, gdt_cfg))
    if workers <= 1:
        results = map(_train_cell_job, jobs)
        return dict(sorted(results))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return dict(sorted(pool.map(_train_cell_job, jobs)))


def hidden_arch(input_dim: int, hidden: tuple[int, ...], n_out: int) -> FnnArch:
    return FnnArch((input_dim, *hidden, n_out))


def train_proto_model(
    ds: LabeledDataset,
    hidden: tuple[int, ...],
    features: list[FeatureSpec],
    k: int,
    r: int,
    mode: str,
    sgd_cfg: SgdConfig | None = None,
    gdt_cfg: GdtConfig | None = None,
    seed: int = 0,
    workers: int = 1,
    split_seed=None,
) -> ProtoModel:
    sgd_cfg = sgd_cfg or SgdConfig()
    gdt_cfg = gdt_cfg or GdtConfig()
    batches = build_featured_batches(ds, features, k, r, split_seed)
    dim = next(iter(batches.values())).inputs.shape[1]
    arch = hidden_arch(dim, hidden, ds.label_count // k)
    cells = train_cells(batches, arch, mode, sgd_cfg, gdt_cfg, seed, workers)
    catalog = {c: res.params for c, res in cells.items() if res.completed}
    return ProtoModel(mode, arch, list(features), k, r, ds.label_count, catalog, cells)


# -- manifest -------------------------------------------------------------------


def weight_filename(cell: tuple[int, int, int]) -> str:
    i, j, s = cell
    return f"f{i:02d}_m{j:03d}_s{s:02d}.fnn"


def save_proto_model(pm: ProtoModel, out_dir, decimals: int = 4) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "weights").mkdir(parents=True, exist_ok=True)
    cells = []
    for cell in pm.cell_keys():
        res = pm.cells.get(cell)
        entry = {"cell": list(cell)}
        if cell in pm.catalog:
            rel = f"weights/{weight_filename(cell)}"
            fnn.save_params(pm.catalog[cell], out_dir / rel, decimals)
            entry["weights"] = rel
        if res is not None:
            entry.update(
                completed=res.completed,
                status=res.status,
                accuracy=None if res.accuracy is None else round(res.accuracy, 12),
                sgd_accuracy=None if res.sgd_accuracy is None else round(res.sgd_accuracy, 12),
                message=res.message,
                conflicts=res.conflicts,
                error_trace=[int(v) for v in res.error_trace],
            )
        cells.append(entry)
    manifest = {
        "mode": pm.mode,
        "arch_tag": f"h{len(pm.arch.sizes) - 2}",
        "arch": pm.arch.tag,
        "features": [f.name for f in pm.features],
        "k": pm.k,
        "r": pm.r,
        "label_count": pm.label_count,
        "decimals": decimals,
        "partial": pm.partial,
        "cells": cells,
    }
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_proto_model(out_dir) -> ProtoModel:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    catalog, cells = {}, {}
    for entry in manifest["cells"]:
        cell = tuple(entry["cell"])
        params = None
        if "weights" in entry:
            params = fnn.load_params(out_dir / entry["weights"])
            catalog[cell] = params
        cells[cell] = CellResult(
            params,
            entry.get("completed", params is not None),
            entry.get("accuracy"),
            entry.get("sgd_accuracy"),
            entry.get("status", ""),
            entry.get("message", ""),
            entry.get("conflicts", []),
            entry.get("error_trace", []),
        )
    return ProtoModel(
        manifest["mode"],
        FnnArch.from_tag(manifest["arch"]),
        [feature_by_name(name) for name in manifest["features"]],
        manifest["k"],
        manifest["r"],
        manifest["label_count"],
        catalog,
        cells,
    )
