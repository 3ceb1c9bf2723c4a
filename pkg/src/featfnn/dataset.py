"""Labeled image datasets, label modules, submodule splits and featured batches."""
from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSpec, feature_dim, transform_image


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images ``(N, H, W, 3)`` uint8 with unique string ids and global labels."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray
    label_count: int

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if self.images.shape[0] != n or self.labels.shape[0] != n:
            raise DataError("ids, images and labels differ in length")
        if len(set(self.ids)) != n:
            raise DataError("image ids are not unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.label_count):
            raise DataError(f"labels outside [0, {self.label_count - 1}]")

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            [self.ids[t] for t in index],
            self.images[index] if len(index) else self.images[:0],
            self.labels[index],
            self.label_count,
        )

    def canonical_order(self) -> np.ndarray:
        """Indices sorted by (global label, image id)."""
        return np.array(
            sorted(range(len(self)), key=lambda t: (int(self.labels[t]), self.ids[t])),
            dtype=np.int64,
        )


@dataclass
class FeaturedBatch:
    feature: int
    module: int
    submodule: int
    inputs: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Conflict:
    feature: int
    ids: tuple[str, str]
    digest: str
    labels: tuple[int, int]


@dataclass
class ConflictReport:
    conflicts: list[Conflict]

    def __bool__(self):
        return bool(self.conflicts)

    def pairs(self) -> set[frozenset]:
        return {frozenset(c.ids) for c in self.conflicts}


def module_of_label(g: int, k: int, L: int) -> tuple[int, int]:
    """1-based module index and local label of global label ``g``."""
    if L % k:
        raise ConfigError(f"k={k} does not divide L={L}")
    if not 0 <= g < L:
        raise ValueError(f"label {g} outside [0, {L - 1}]")
    per = L // k
    return g // per + 1, g % per


def global_label(j: int, local: int, k: int, L: int) -> int:
    return (j - 1) * (L // k) + local


def modularize(ds: LabeledDataset, k: int) -> list[LabeledDataset]:
    if k < 1 or ds.label_count % k:
        raise ConfigError(f"k={k} does not divide L={ds.label_count}")
    per = ds.label_count // k
    module = ds.labels // per
    return [ds.subset(np.flatnonzero(module == j)) for j in range(k)]


def split_submodules(batch: LabeledDataset, r: int, seed=None) -> list[LabeledDataset]:
    """Contiguous near-equal pieces of the batch sorted by image id.

    With a ``seed`` the id-sorted order is first permuted by that seed, which
    spreads labels over the pieces when ids correlate with labels.
    """
    if r < 1:
        raise ConfigError("r must be >= 1")
    if r > max(len(batch), 1):
        raise ConfigError(f"r={r} exceeds batch size {len(batch)}")
    order = np.array(sorted(range(len(batch)), key=lambda t: batch.ids[t]), dtype=np.int64)
    if seed is not None:
        order = order[np.random.default_rng(seed).permutation(len(order))]
    return [batch.subset(piece) for piece in np.array_split(order, r)]


def materialize_featured_batch(
    subset: LabeledDataset, spec: FeatureSpec, k: int, feature: int = 1, module: int = 1, submodule: int = 1
) -> FeaturedBatch:
    per = subset.label_count // k
    if len(subset):
        inputs = transform_image(spec, subset.images)
    else:
        h, w = subset.images.shape[1:3] if subset.images.ndim == 4 else (64, 64)
        inputs = np.zeros((0, feature_dim(h, w)))
    return FeaturedBatch(feature, module, submodule, inputs, subset.labels % per, list(subset.ids))


def quantized_digest(row: np.ndarray, decimals: int) -> str:
    q = np.round(np.asarray(row, dtype=np.float64), decimals) + 0.0
    return hashlib.sha256(q.tobytes()).hexdigest()[:16]


def scan_double_labels(fb: FeaturedBatch, decimals: int = 4) -> ConflictReport:
    """Pairs whose inputs agree after rounding to ``decimals`` but whose labels differ."""
    if decimals < 1:
        raise ValueError("decimals must be >= 1")
    groups: dict[str, list[int]] = {}
    for t, row in enumerate(fb.inputs):
        groups.setdefault(quantized_digest(row, decimals), []).append(t)
    ids = fb.ids or [str(t) for t in range(len(fb))]
    conflicts = []
    for digest, members in groups.items():
        for a_pos, a in enumerate(members):
            for b in members[a_pos + 1:]:
                if fb.labels[a] != fb.labels[b]:
                    (ia, la), (ib, lb) = sorted([(ids[a], int(fb.labels[a])), (ids[b], int(fb.labels[b]))])
                    conflicts.append(Conflict(fb.feature, (ia, ib), digest, (la, lb)))
    conflicts.sort(key=lambda c: (c.feature, c.ids, c.labels))
    return ConflictReport(conflicts)


def partition_eval_batches(ds: LabeledDataset, b: int = 10) -> list[LabeledDataset]:
    if b < 1:
        raise ConfigError("batch count must be >= 1")
    if b > len(ds):
        raise ConfigError(f"{b} batches requested for {len(ds)} items")
    return [ds.subset(piece) for piece in np.array_split(ds.canonical_order(), b)]


def synthetic_dataset(
    label_count: int = 4,
    per_label: int = 50,
    size: int = 64,
    seed: int = 0,
    noise: float = 40.0,
    separation: float = 1.0,
) -> LabeledDataset:
    """Class-prototype images plus pixel noise; ids interleave labels.

    ``separation`` scales how far each class prototype sits from a shared
    base image; small values give overlapping, harder classes.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(40, 215, size=(size, size, 3))
    offsets = rng.uniform(-87.5, 87.5, size=(label_count, size, size, 3))
    protos = base + separation * offsets
    n = label_count * per_label
    labels = np.arange(n) % label_count
    imgs = protos[labels] + rng.normal(0.0, noise, size=(n, size, size, 3))
    imgs = np.clip(np.rint(imgs), 0, 255).astype(np.uint8)
    ids = [f"img{t:06d}" for t in range(n)]
    return LabeledDataset(ids, imgs, labels, label_count)


# -- file formats ------------------------------------------------------------


def _atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_tensor_file(ds: LabeledDataset, path) -> None:
    """``FNB1`` binary: u32 count, H, W; uint8 pixels; u16 labels (little-endian)."""
    n, h, w = len(ds), ds.images.shape[1], ds.images.shape[2]
    data = b"FNB1" + struct.pack("<III", n, h, w)
    data += np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes()
    data += ds.labels.astype("<u2").tobytes()
    _atomic_write_bytes(path, data)


def read_tensor_file(path, label_count: int | None = None) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != b"FNB1":
        raise DataError(f"{path}: not an FNB1 tensor file")
    n, h, w = struct.unpack("<III", raw[4:16])
    npix = n * h * w * 3
    if len(raw) != 16 + npix + 2 * n:
        raise DataError(f"{path}: truncated or oversized tensor file")
    images = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=16).reshape(n, h, w, 3)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=16 + npix).astype(np.int64)
    if label_count is None:
        label_count = int(labels.max()) + 1 if n else 1
    ids = [f"{t:08d}" for t in range(n)]
    return LabeledDataset(ids, images.copy(), labels, label_count)


def read_image_dir(manifest_path, label_count: int | None = None) -> LabeledDataset:
    """PNG images listed in a CSV manifest with header ``id,filename,label``."""
    from PIL import Image

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    ids, images, labels = [], [], []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "filename", "label"]:
            raise DataError(f"{manifest_path}: header must be id,filename,label")
        for row in reader:
            with Image.open(root / row["filename"]) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
            ids.append(row["id"])
            labels.append(int(row["label"]))
    if not images:
        raise DataError(f"{manifest_path}: no images")
    if len({im.shape for im in images}) != 1:
        raise DataError(f"{manifest_path}: images differ in size")
    if label_count is None:
        label_count = max(labels) + 1
    return LabeledDataset(ids, np.stack(images), np.array(labels), label_count)


def load_dataset(path, label_count: int | None = None) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.suffix.lower() == ".csv":
        return read_image_dir(path, label_count)
    return read_tensor_file(path, label_count)


def write_featured_cache(fb: FeaturedBatch, path) -> None:
    """``FVB1`` binary: u32 count, dim; float32 inputs; u16 local labels."""
    inputs = np.asarray(fb.inputs, dtype="<f4")
    n = len(fb.labels)
    dim = inputs.shape[1] if inputs.ndim == 2 else 0
    data = b"FVB1" + struct.pack("<II", n, dim) + inputs.tobytes()
    data += np.asarray(fb.labels).astype("<u2").tobytes()
    _atomic_write_bytes(path, data)


def read_featured_cache(path, feature=1, module=1, submodule=1, ids=None) -> FeaturedBatch:
    raw = Path(path).read_bytes()
    if raw[:4] != b"FVB1":
        raise DataError(f"{path}: not an FVB1 cache file")
    n, dim = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * n * dim + 2 * n:
        raise DataError(f"{path}: truncated or oversized cache file")
    inputs = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=12).reshape(n, dim).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=12 + 4 * n * dim).astype(np.int64)
    return FeaturedBatch(feature, module, submodule, inputs, labels, list(ids) if ids is not None else [])


def submodule_subsets(ds: LabeledDataset, k: int, r: int, split_seed=None) -> dict[tuple[int, int], LabeledDataset]:
    """Image subset of every (module, submodule) pair, 1-based."""
    subsets = {}
    for j, batch in enumerate(modularize(ds, k), start=1):
        for s, piece in enumerate(split_submodules(batch, r, split_seed), start=1):
            subsets[(j, s)] = piece
    return subsets


def build_featured_batches(
    ds: LabeledDataset, features: list[FeatureSpec], k: int, r: int, split_seed=None
) -> dict[tuple[int, int, int], FeaturedBatch]:
    """Featured batch of every (feature, module, submodule) cell, 1-based."""
    batches = {}
    for (j, s), piece in submodule_subsets(ds, k, r, split_seed).items():
        for i, spec in enumerate(features, start=1):
            batches[(i, j, s)] = materialize_featured_batch(piece, spec, k, i, j, s)
    return dict(sorted(batches.items()))
