"""RGB feature channels and the image -> input-vector preprocessing pipeline.

An image is an ``(H, W, 3)`` array of integer intensities in ``[0, 255]``.
A feature is a fixed linear combination of the three color planes. The
pipeline is::

    feature combination -> 2x2 mean pooling -> 1-pixel border trim
        -> affine scale to [-1, 1] -> row-major flatten

so a 64x64 image becomes a 900-vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

# Slack for float round-off when checking the theoretical range.
_RANGE_SLACK = 1e-9


class DimensionError(ValueError):
    pass


class RangeError(ValueError):
    pass


def _parse_weight(text: str) -> float:
    return float(Fraction(text))


@dataclass(frozen=True)
class FeatureSpec:
    """One feature channel: ``wr*R + wg*G + wb*B``.

    Weights are kept as their decimal literal text (``"0.618"``, ``"1/3"``) so
    the catalog serializes back to the exact table entries.
    """

    name: str
    wr_text: str
    wg_text: str
    wb_text: str

    def __post_init__(self):
        w = self.weights
        if np.any(w < 0):
            raise ValueError(f"feature {self.name}: negative weight")
        if not 0 < self.weight_sum <= 1.0887 + 1e-12:
            raise ValueError(f"feature {self.name}: weight sum {self.weight_sum} out of (0, 1.0887]")

    @property
    def wr(self) -> float:
        return _parse_weight(self.wr_text)

    @property
    def wg(self) -> float:
        return _parse_weight(self.wg_text)

    @property
    def wb(self) -> float:
        return _parse_weight(self.wb_text)

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.wr, self.wg, self.wb], dtype=np.float64)

    @property
    def weight_sum(self) -> float:
        return float(sum(Fraction(t) for t in (self.wr_text, self.wg_text, self.wb_text)))

    def to_line(self) -> str:
        return f"{self.name} {self.wr_text} {self.wg_text} {self.wb_text}"

    @classmethod
    def from_line(cls, line: str) -> "FeatureSpec":
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"bad catalog line: {line!r}")
        return cls(*parts)


_CATALOG_TEXT = """\
R 1 0 0
G 0 1 0
B 0 0 1
RGg1 0.618 0.382 0
RBg1 0.618 0 0.382
GBg1 0 0.618 0.382
RGg2 0.382 0.618 0
RBg2 0.382 0 0.618
GBg2 0 0.382 0.618
RG 0.5 0.5 0
RB 0.5 0 0.5
GB 0 0.5 0.5
eRGB 1/3 1/3 1/3
BW 0.299 0.587 0.114
X 0.4125 0.3576 0.1804
Y 0.2126 0.7152 0.0722
Z 0.0193 0.1192 0.9502
"""

CATALOG: tuple[FeatureSpec, ...] = tuple(
    FeatureSpec.from_line(line) for line in _CATALOG_TEXT.splitlines()
)

# Featured-model presets: Model-1..Model-6 use the first p catalog entries.
MODEL_PRESETS = {1: 3, 2: 6, 3: 9, 4: 12, 5: 15, 6: 17}


def feature_by_name(name: str) -> FeatureSpec:
    for spec in CATALOG:
        if spec.name == name:
            return spec
    raise KeyError(f"unknown feature {name!r}")


def export_catalog(specs=CATALOG) -> str:
    return "".join(spec.to_line() + "\n" for spec in specs)


def import_catalog(text: str) -> list[FeatureSpec]:
    return [FeatureSpec.from_line(line) for line in text.splitlines() if line.strip()]


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim < 3 or img.shape[-1] != 3:
        raise DimensionError(f"expected (..., H, W, 3) image array, got shape {img.shape}")
    h, w = img.shape[-3], img.shape[-2]
    if h % 2 or w % 2 or h < 4 or w < 4:
        raise DimensionError(f"image must be even-sized and at least 4x4, got {h}x{w}")
    return img


def downsample_mean(m: np.ndarray) -> np.ndarray:
    """Mean over non-overlapping 2x2 cells; works on ``(..., H, W)`` stacks."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape[-2], m.shape[-1]
    if h % 2 or w % 2:
        raise DimensionError(f"downsample_mean needs even dimensions, got {h}x{w}")
    blocks = m.reshape(*m.shape[:-2], h // 2, 2, w // 2, 2)
    return blocks.sum(axis=(-3, -1)) / 4.0


def trim_border(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    h, w = m.shape[-2], m.shape[-1]
    if h < 3 or w < 3:
        raise DimensionError(f"trim_border needs at least 3x3, got {h}x{w}")
    return _trim(m)


def _trim(m):
    return m[..., 1:-1, 1:-1]


def apply_feature(spec: FeatureSpec, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise DimensionError(f"expected 3 color planes, got shape {img.shape}")
    wr, wg, wb = spec.weights
    return wr * img[..., 0] + wg * img[..., 1] + wb * img[..., 2]


def scale_to_unit(m: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Affine map of the feature's theoretical range ``[0, 255*S]`` onto ``[-1, 1]``."""
    m = np.asarray(m, dtype=np.float64)
    top = 255.0 * spec.weight_sum
    slack = _RANGE_SLACK * max(top, 1.0)
    if m.size and (m.min() < -slack or m.max() > top + slack):
        raise RangeError(
            f"feature {spec.name}: values [{m.min()}, {m.max()}] outside [0, {top}]"
        )
    return np.clip(2.0 * m / top - 1.0, -1.0, 1.0)


def transform_image(spec: FeatureSpec, img: np.ndarray) -> np.ndarray:
    """Feature vector of one image, or of a stack ``(N, H, W, 3)`` -> ``(N, D)``."""
    img = _check_image(img)
    # a 4x4 image pools to 2x2 and trims to an empty map, so no size check here
    pooled = _trim(downsample_mean(apply_feature(spec, img)))
    scaled = scale_to_unit(pooled, spec)
    return scaled.reshape(*scaled.shape[:-2], scaled.shape[-2] * scaled.shape[-1])


def feature_dim(height: int, width: int) -> int:
    return (height // 2 - 2) * (width // 2 - 2)
