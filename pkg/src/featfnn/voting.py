"""Three-step majority voting over a featured model.

1. every FNN ``(i, j, s)`` proposes its top-``m`` labels with their losses;
2. each submodule ``(j, s)`` picks the label listed by the most features;
3. the submodule winner with the most votes is the prediction, ties going to
   the submodule whose per-feature losses have the smallest variance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fnn
from .features import transform_image
from .training import ProtoModel


class PartialModelError(RuntimeError):
    pass


@dataclass
class FeaturedModel:
    proto: ProtoModel
    p: int

    def __post_init__(self):
        if not 1 <= self.p <= self.proto.n:
            raise ValueError(f"p={self.p} outside [1, {self.proto.n}]")

    @property
    def features(self):
        return self.proto.features[: self.p]

    @property
    def k(self) -> int:
        return self.proto.k

    @property
    def r(self) -> int:
        return self.proto.r

    @property
    def labels_per_module(self) -> int:
        return self.proto.label_count // self.proto.k


@dataclass
class Records:
    """Candidate labels (global) and losses, shape ``(p, k, r, m)``."""

    labels: np.ndarray
    losses: np.ndarray

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class SubmoduleWinner:
    label: int
    votes: int
    feature_losses: np.ndarray


@dataclass
class VoteOutcome:
    label: int
    cell: tuple[int, int]
    votes: int
    p: int
    super_majority: bool
    tie_break_used: bool
    # (cell, label, loss variance) of every submodule that tied at the top vote count
    tie_candidates: list = field(default_factory=list)


def _effective_m(fm: FeaturedModel, m: int) -> int:
    if m < 1:
        raise ValueError("protocol m must be >= 1")
    return min(m, fm.labels_per_module)


def predict_records_batch(fm: FeaturedModel, images: np.ndarray, m: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Records for a stack of images: arrays of shape ``(N, p, k, r, m)``.

    ``m`` is capped at the FNN output size.
    """
    proto = fm.proto
    m = _effective_m(fm, m)
    images = np.asarray(images)
    n = images.shape[0]
    per = fm.labels_per_module
    labels = np.empty((n, fm.p, fm.k, fm.r, m), dtype=np.int64)
    losses = np.empty((n, fm.p, fm.k, fm.r, m), dtype=np.float64)
    for i, spec in enumerate(fm.features, start=1):
        x = transform_image(spec, images)
        for j in range(1, fm.k + 1):
            for s in range(1, fm.r + 1):
                params = proto.catalog.get((i, j, s))
                if params is None:
                    raise PartialModelError(f"no trained FNN for cell {(i, j, s)}")
                top, eps = fnn.predict_top_batch(params, x, m)
                labels[:, i - 1, j - 1, s - 1] = top + (j - 1) * per
                losses[:, i - 1, j - 1, s - 1] = eps
    return labels, losses


def predict_records(fm: FeaturedModel, img: np.ndarray, m: int = 1) -> Records:
    labels, losses = predict_records_batch(fm, np.asarray(img)[None], m)
    return Records(labels[0], losses[0])


def submodule_winner(labels: np.ndarray, losses: np.ndarray) -> SubmoduleWinner:
    """Step two for one submodule; ``labels``/``losses`` have shape ``(p, m)``.

    A feature votes for every label in its candidate list. Vote ties go to the
    smaller summed loss, then the smaller label.
    """
    labels = np.asarray(labels).reshape(len(labels), -1)
    losses = np.asarray(losses, dtype=np.float64).reshape(len(labels), -1)
    votes: dict[int, int] = {}
    summed: dict[int, float] = {}
    for row_labels, row_losses in zip(labels, losses):
        for lab in set(int(v) for v in row_labels):
            votes[lab] = votes.get(lab, 0) + 1
        for lab, eps in zip(row_labels, row_losses):
            summed[int(lab)] = summed.get(int(lab), 0.0) + float(eps)
    best = min(votes, key=lambda lab: (-votes[lab], summed[lab], lab))
    return SubmoduleWinner(best, votes[best], losses[:, 0].copy())


def majority_vote(winners: dict[tuple[int, int], SubmoduleWinner], p: int) -> VoteOutcome:
    """Step three over all ``k*r`` submodule winners."""
    if not winners:
        raise ValueError("no submodule winners")
    top = max(w.votes for w in winners.values())
    tied = sorted(cell for cell, w in winners.items() if w.votes == top)
    tie_break = len(tied) > 1
    candidates = []
    if tie_break:
        # population variance of each tying submodule's per-feature losses
        variances = {cell: float(np.var(winners[cell].feature_losses)) for cell in tied}
        chosen = min(tied, key=lambda cell: (variances[cell], cell))
        candidates = [(cell, winners[cell].label, variances[cell]) for cell in tied]
    else:
        chosen = tied[0]
    w = winners[chosen]
    return VoteOutcome(w.label, chosen, w.votes, p, w.votes == p, tie_break, candidates)


def aggregate(labels: np.ndarray, losses: np.ndarray) -> VoteOutcome:
    """Steps two and three on one record tensor of shape ``(p, k, r, m)``."""
    p, k, r = labels.shape[:3]
    winners = {
        (j + 1, s + 1): submodule_winner(labels[:, j, s], losses[:, j, s])
        for j in range(k)
        for s in range(r)
    }
    return majority_vote(winners, p)


def classify(fm: FeaturedModel, img: np.ndarray, m: int = 1) -> VoteOutcome:
    rec = predict_records(fm, img, m)
    return aggregate(rec.labels, rec.losses)


def classify_batch(fm: FeaturedModel, images: np.ndarray, m: int = 1) -> list[VoteOutcome]:
    labels, losses = predict_records_batch(fm, images, m)
    return [aggregate(labels[t], losses[t]) for t in range(len(labels))]


def format_records(rec: Records) -> str:
    """One line ``i j s label loss`` per candidate, 1-based indices."""
    lines = []
    p, k, r, m = rec.shape
    for i in range(p):
        for j in range(k):
            for s in range(r):
                for c in range(m):
                    lines.append(f"{i + 1} {j + 1} {s + 1} {rec.labels[i, j, s, c]} {rec.losses[i, j, s, c]:.6f}")
    return "\n".join(lines) + "\n"


def parse_records(text: str) -> Records:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    idx = np.array([[int(v) for v in row[:3]] for row in rows])
    p, k, r = idx.max(axis=0)
    m = len(rows) // (p * k * r)
    labels = np.zeros((p, k, r, m), dtype=np.int64)
    losses = np.zeros((p, k, r, m))
    fill: dict[tuple, int] = {}
    for (i, j, s), row in zip(idx, rows):
        c = fill.get((i, j, s), 0)
        fill[(i, j, s)] = c + 1
        labels[i - 1, j - 1, s - 1, c] = int(row[3])
        losses[i - 1, j - 1, s - 1, c] = float(row[4])
    return Records(labels, losses)
