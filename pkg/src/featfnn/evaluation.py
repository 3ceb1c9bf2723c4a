"""Training/model evaluation metrics, confusion statistics and the confusion wheel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fnn
from .dataset import FeaturedBatch, LabeledDataset
from .fnn import FnnParams
from .training import ProtoModel
from .voting import FeaturedModel, PartialModelError, VoteOutcome, classify_batch


class EvaluationError(ValueError):
    pass


@dataclass
class TrainingEvalTable:
    accuracies: dict[tuple[int, int, int], float]
    n: int
    k: int
    r: int

    def _values(self) -> np.ndarray:
        return np.array([self.accuracies[c] for c in sorted(self.accuracies)])

    @property
    def min(self) -> float:
        return float(self._values().min())

    @property
    def mean(self) -> float:
        return float(self._values().mean())

    @property
    def median(self) -> float:
        return float(np.median(self._values()))

    @property
    def max(self) -> float:
        return float(self._values().max())

    @property
    def perfect_fnns(self) -> int:
        return sum(1 for v in self.accuracies.values() if v == 100.0)

    @property
    def error_free_cells(self) -> int:
        """(module, submodule) pairs whose FNNs are error-free for every feature."""
        return sum(
            1
            for j in range(1, self.k + 1)
            for s in range(1, self.r + 1)
            if all(self.accuracies[(i, j, s)] == 100.0 for i in range(1, self.n + 1))
        )

    def as_report(self) -> dict:
        return {
            "min": f"{self.min:.3f}",
            "mean": f"{self.mean:.3f}",
            "median": f"{self.median:.3f}",
            "max": f"{self.max:.3f}",
            "error_free_fnns": f"{self.perfect_fnns}/{self.n * self.k * self.r}",
            "error_free_cells": f"{self.error_free_cells}/{self.k * self.r}",
        }


def training_evaluation(pm: ProtoModel, batches: dict[tuple[int, int, int], FeaturedBatch]) -> TrainingEvalTable:
    """Accuracy of each FNN on its own featured batch, in percent."""
    acc = {}
    for cell in pm.cell_keys():
        if cell not in pm.catalog:
            raise PartialModelError(f"no trained FNN for cell {cell}")
        if cell not in batches:
            raise EvaluationError(f"no featured batch for cell {cell}")
        fb = batches[cell]
        correct = int(np.sum(fnn.predict(pm.catalog[cell], fb.inputs) == fb.labels)) if len(fb) else 0
        acc[cell] = 100.0 * correct / len(fb) if len(fb) else 100.0
    return TrainingEvalTable(acc, pm.n, pm.k, pm.r)


@dataclass
class ModelEval:
    accuracy: float
    top1: float
    outcomes: list[VoteOutcome]
    predicted: np.ndarray
    true: np.ndarray


def top1_rate(outcomes: list[VoteOutcome], true) -> float:
    """Share of correct predictions that carried a super-majority, in percent."""
    correct = [o for o, t in zip(outcomes, true) if o.label == int(t)]
    if not correct:
        return 100.0
    return 100.0 * sum(o.super_majority for o in correct) / len(correct)


def model_evaluation(fm: FeaturedModel, ds: LabeledDataset, m: int = 1) -> ModelEval:
    if len(ds) == 0:
        raise EvaluationError("model evaluation on an empty dataset")
    outcomes = classify_batch(fm, ds.images, m)
    predicted = np.array([o.label for o in outcomes], dtype=np.int64)
    acc = 100.0 * float(np.sum(predicted == ds.labels)) / len(ds)
    return ModelEval(acc, top1_rate(outcomes, ds.labels), outcomes, predicted, ds.labels.copy())


def confusion_matrix(predicted, true, label_count: int) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise EvaluationError("predicted and true labels differ in length")
    for arr in (predicted, true):
        if arr.size and (arr.min() < 0 or arr.max() >= label_count):
            raise EvaluationError(f"label outside [0, {label_count - 1}]")
    mat = np.zeros((label_count, label_count), dtype=np.int64)
    np.add.at(mat, (true, predicted), 1)
    return mat


def perfect_labels(mat: np.ndarray) -> np.ndarray:
    """Labels whose row is non-empty and purely diagonal."""
    diag = np.diag(mat)
    rows = mat.sum(axis=1)
    return np.flatnonzero((rows > 0) & (diag == rows))


def errorless_labels(matrices: list[np.ndarray]) -> tuple[float, int, list[int]]:
    """(mean perfect-label count per batch, count perfect overall, those labels)."""
    if not matrices:
        raise EvaluationError("need at least one confusion matrix")
    by_batch = float(np.mean([len(perfect_labels(m)) for m in matrices]))
    everywhere = [int(v) for v in perfect_labels(np.sum(matrices, axis=0))]
    return by_batch, len(everywhere), everywhere


# -- confusion wheel ---------------------------------------------------------------


@dataclass
class WheelPlot:
    points: np.ndarray
    true: np.ndarray
    predicted: np.ndarray
    misclassified: np.ndarray
    outside_sector: np.ndarray
    n_classes: int
    ids: list[str]

    @property
    def spokes(self) -> np.ndarray:
        return spoke_matrix(self.n_classes)


def spoke_matrix(n_classes: int) -> np.ndarray:
    """``2 x C`` matrix whose column ``c`` is the unit vector at angle ``2*pi*c/C``."""
    theta = 2.0 * np.pi * np.arange(n_classes) / n_classes
    return np.vstack([np.cos(theta), np.sin(theta)])


def wheel_points(probs: np.ndarray) -> np.ndarray:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return probs @ spoke_matrix(probs.shape[1]).T


def angle_deviation(points: np.ndarray, classes: np.ndarray, n_classes: int) -> np.ndarray:
    angle = np.arctan2(points[:, 1], points[:, 0])
    target = 2.0 * np.pi * np.asarray(classes) / n_classes
    return np.abs((angle - target + np.pi) % (2.0 * np.pi) - np.pi)


def confusion_wheel(params: FnnParams, fb: FeaturedBatch) -> tuple[WheelPlot, str]:
    n_classes = params.arch.n_outputs
    probs = fnn.forward(params, fb.inputs) if len(fb) else np.zeros((0, n_classes))
    points = wheel_points(probs) if len(fb) else np.zeros((0, 2))
    predicted = np.argmax(probs, axis=1) if len(fb) else np.zeros(0, dtype=np.int64)
    true = np.asarray(fb.labels, dtype=np.int64)
    outside = angle_deviation(points, true, n_classes) > np.pi / n_classes
    ids = fb.ids or [str(t) for t in range(len(fb))]
    plot = WheelPlot(points, true, predicted, predicted != true, outside, n_classes, list(ids))
    return plot, render_wheel_svg(plot)


_CANVAS = 1000
_RADIUS = 450


def label_color(c: int, n_classes: int) -> str:
    return f"hsl({360.0 * c / n_classes:.1f},70%,45%)"


def render_wheel_svg(plot: WheelPlot, title: str = "") -> str:
    cx = cy = _CANVAS / 2

    def xy(x, y):
        return cx + _RADIUS * x, cy - _RADIUS * y

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_CANVAS}" height="{_CANVAS}" '
        f'viewBox="0 0 {_CANVAS} {_CANVAS}">',
        f'<rect width="{_CANVAS}" height="{_CANVAS}" fill="white"/>',
        f'<circle cx="{cx:.0f}" cy="{cy:.0f}" r="{_RADIUS}" fill="none" stroke="#444" stroke-width="2"/>',
    ]
    if title:
        out.append(f'<text x="20" y="30" font-size="20" font-family="sans-serif">{title}</text>')
    spokes = spoke_matrix(plot.n_classes)
    for c in range(plot.n_classes):
        ex, ey = xy(*spokes[:, c])
        lx, ly = xy(*(1.06 * spokes[:, c]))
        out.append(
            f'<line x1="{cx:.0f}" y1="{cy:.0f}" x2="{ex:.3f}" y2="{ey:.3f}" '
            f'stroke="{label_color(c, plot.n_classes)}" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{lx:.3f}" y="{ly:.3f}" font-size="14" font-family="sans-serif" '
            f'text-anchor="middle" dominant-baseline="middle">{c}</text>'
        )
    for (x, y), t, bad in zip(plot.points, plot.true, plot.misclassified):
        px, py = xy(x, y)
        color = label_color(int(t), plot.n_classes)
        if bad:
            out.append(
                f'<circle cx="{px:.3f}" cy="{py:.3f}" r="5" fill="{color}" stroke="black" stroke-width="2"/>'
            )
        else:
            out.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="3" fill="{color}" fill-opacity="0.7"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- report formats -----------------------------------------------------------------


def format_report(values: dict) -> str:
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def format_confusion_csv(mat: np.ndarray) -> str:
    lines = ["true,pred,count"]
    for t, p in zip(*np.nonzero(mat)):
        lines.append(f"{t},{p},{mat[t, p]}")
    return "\n".join(lines) + "\n"


def format_wheel_csv(plot: WheelPlot) -> str:
    lines = ["sample_id,x,y,true,pred,outside_sector"]
    for sid, (x, y), t, p, o in zip(plot.ids, plot.points, plot.true, plot.predicted, plot.outside_sector):
        lines.append(f"{sid},{x:.6f},{y:.6f},{t},{p},{int(o)}")
    return "\n".join(lines) + "\n"


def model_eval_report(result: ModelEval, batch_matrices: list[np.ndarray], m: int, p: int) -> dict:
    by_batch, n_all, labels = errorless_labels(batch_matrices)
    report = {
        "protocol_m": m,
        "protocol": "expanded-top3" if m > 1 else "top1",
        "features": p,
        "samples": len(result.true),
        "accuracy": f"{result.accuracy:.3f}",
        "top1": f"{result.top1:.3f}",
        "super_majority_correct": sum(
            1 for o, t in zip(result.outcomes, result.true) if o.label == t and o.super_majority
        ),
        "tie_breaks": sum(o.tie_break_used for o in result.outcomes),
        "eval_batches": len(batch_matrices),
        "errorless_by_batch": f"{by_batch:.1f}",
        "errorless_all": n_all,
        "errorless_labels": " ".join(str(v) for v in labels),
    }
    return report
