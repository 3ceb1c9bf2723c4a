"""Dense feedforward network: ReLU hidden layers, softmax output, cross-entropy.

Parameters are stored as ``weights[l]`` of shape ``(fan_in, fan_out)`` and
``biases[l]`` of shape ``(fan_out,)`` so a layer computes ``x @ W + b``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .features import DimensionError


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class FnnArch:
    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 3:
            raise ValueError("an architecture needs input, at least one hidden layer and output")
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"layer sizes must be positive: {self.sizes}")

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    @property
    def tag(self) -> str:
        return "x".join(str(s) for s in self.sizes)

    @classmethod
    def from_tag(cls, tag: str) -> "FnnArch":
        return cls(tuple(int(s) for s in tag.split("x")))


@dataclass
class FnnParams:
    arch: FnnArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    decimals: int | None = None

    def copy(self) -> "FnnParams":
        return FnnParams(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.decimals,
        )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def equals(self, other: "FnnParams") -> bool:
        return (
            self.arch == other.arch
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass
class PredictionRecord:
    """Top-m candidates of one FNN on one input, sorted by ascending loss."""

    labels: list[int]
    losses: list[float]
    cell: tuple[int, int, int] | None = field(default=None)


def init_params(arch: FnnArch, seed) -> FnnParams:
    """Uniform fan-based (Glorot) weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.sizes[:-1], arch.sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return FnnParams(arch, weights, biases)


def zero_params(arch: FnnArch) -> FnnParams:
    return FnnParams(
        arch,
        [np.zeros((a, b)) for a, b in zip(arch.sizes[:-1], arch.sizes[1:])],
        [np.zeros(b) for b in arch.sizes[1:]],
    )


def _as_inputs(p: FnnParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != p.arch.n_inputs:
        raise DimensionError(f"input of shape {x.shape} does not fit arch {p.arch.tag}")
    return x2, single


def _forward_cache(p: FnnParams, x2: np.ndarray):
    """Hidden activations (input included) and output logits."""
    acts = [x2]
    a = x2
    last = len(p.weights) - 1
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = a @ w + b
        if l < last:
            a = np.maximum(z, 0.0)
            acts.append(a)
        else:
            return acts, z
    raise AssertionError("unreachable")


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(p: FnnParams, x) -> np.ndarray:
    x2, single = _as_inputs(p, x)
    _, z = _forward_cache(p, x2)
    return z[0] if single else z


def forward(p: FnnParams, x) -> np.ndarray:
    """Class probabilities for one input vector or a batch of rows."""
    return softmax(logits(p, x))


def loss(probs, y: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= y < probs.shape[-1]:
        raise DomainError(f"label {y} outside [0, {probs.shape[-1] - 1}]")
    return float(-np.log(probs[y]))


def label_losses(p: FnnParams, x) -> np.ndarray:
    """Cross-entropy ``-log softmax`` against every one-hot target."""
    return -log_softmax(logits(p, x))


def _top_from_losses(eps: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    # stable sort keeps ascending label order among equal losses
    order = np.argsort(eps, axis=-1, kind="stable")[..., :m]
    return order, np.take_along_axis(eps, order, axis=-1)


def predict_top(p: FnnParams, x, m: int = 1) -> PredictionRecord:
    if not 1 <= m <= p.arch.n_outputs:
        raise DomainError(f"m={m} outside [1, {p.arch.n_outputs}]")
    eps = label_losses(p, np.asarray(x, dtype=np.float64).reshape(-1))
    labels, losses = _top_from_losses(eps, m)
    return PredictionRecord([int(v) for v in labels], [float(v) for v in losses])


def predict_top_batch(p: FnnParams, x, m: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`predict_top`: ``(N, m)`` labels and losses."""
    if not 1 <= m <= p.arch.n_outputs:
        raise DomainError(f"m={m} outside [1, {p.arch.n_outputs}]")
    eps = label_losses(p, np.atleast_2d(x))
    return _top_from_losses(eps, m)


def predict(p: FnnParams, x) -> np.ndarray:
    """Argmax labels (ties to the smaller index) for a batch of rows."""
    return np.argmax(logits(p, np.atleast_2d(x)), axis=1)


def accuracy(p: FnnParams, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return 1.0
    return float(np.mean(predict(p, x) == y))


def mean_loss(p: FnnParams, x, y, sample_weights=None) -> float:
    x2, _ = _as_inputs(p, x)
    y = np.asarray(y, dtype=np.int64)
    _, z = _forward_cache(p, x2)
    per = -log_softmax(z)[np.arange(len(y)), y]
    if sample_weights is None:
        return float(per.mean())
    return float(np.sum(per * sample_weights) / len(y))


def grad(p: FnnParams, x, y, sample_weights=None) -> FnnParams:
    """Gradient of the mean cross-entropy over the minibatch ``(x, y)``.

    With ``sample_weights`` the objective is ``sum(w_t * loss_t) / N``.
    """
    x2, _ = _as_inputs(p, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    n = len(y)
    if n == 0:
        raise DomainError("grad needs a non-empty minibatch")
    if len(x2) != n:
        raise DimensionError(f"{len(x2)} inputs but {n} labels")
    if y.min() < 0 or y.max() >= p.arch.n_outputs:
        raise DomainError("label out of range")
    acts, z = _forward_cache(p, x2)
    delta = softmax(z)
    delta[np.arange(n), y] -= 1.0
    if sample_weights is not None:
        delta *= np.asarray(sample_weights, dtype=np.float64)[:, None]
    delta /= n
    gw = [None] * len(p.weights)
    gb = [None] * len(p.weights)
    for l in range(len(p.weights) - 1, -1, -1):
        gw[l] = acts[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ p.weights[l].T) * (acts[l] > 0)
    return FnnParams(p.arch, gw, gb)


def quantize_params(p: FnnParams, d: int) -> FnnParams:
    """Round every entry half-even to ``d`` fractional decimal digits."""
    if d < 1:
        raise DomainError("decimals must be >= 1")
    # + 0.0 turns -0.0 into 0.0 so serialization never writes "-0.000"
    return FnnParams(
        p.arch,
        [np.round(w, d) + 0.0 for w in p.weights],
        [np.round(b, d) + 0.0 for b in p.biases],
        d,
    )


def count_params(n: int, k: int, r: int, arch: FnnArch) -> int:
    per_net = sum((a + 1) * b for a, b in zip(arch.sizes[:-1], arch.sizes[1:]))
    return n * k * r * per_net


def count_neurons(n: int, k: int, r: int, arch: FnnArch) -> int:
    return n * k * r * sum(arch.sizes)


# -- weight files ------------------------------------------------------------


def format_params(p: FnnParams, d: int = 4) -> str:
    q = quantize_params(p, d)
    lines = [f"FNN d={d} arch={p.arch.tag}"]
    for w, b in zip(q.weights, q.biases):
        lines.extend(f"{v:.{d}f}" for v in w.ravel())
        lines.extend(f"{v:.{d}f}" for v in b)
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> FnnParams:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "FNN" or not head[1].startswith("d=") or not head[2].startswith("arch="):
        raise ValueError(f"bad weight-file header: {lines[0]!r}")
    d = int(head[1][2:])
    arch = FnnArch.from_tag(head[2][5:])
    values = np.array([float(v) for v in lines[1:] if v], dtype=np.float64)
    weights, biases = [], []
    pos = 0
    for a, b in zip(arch.sizes[:-1], arch.sizes[1:]):
        weights.append(values[pos:pos + a * b].reshape(a, b))
        pos += a * b
        biases.append(values[pos:pos + b].copy())
        pos += b
    if pos != len(values):
        raise ValueError(f"weight file holds {len(values)} values, arch {arch.tag} needs {pos}")
    return FnnParams(arch, weights, biases, d)


def save_params(p: FnnParams, path, d: int = 4) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_params(p, d))
    os.replace(tmp, path)


def load_params(path) -> FnnParams:
    with open(path, encoding="utf-8") as fh:
        return parse_params(fh.read())
