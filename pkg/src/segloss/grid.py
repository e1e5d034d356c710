"""Dense score grids and label grids shared by the whole loss pipeline.

A prediction map is a height x width x classes block of float64 scores,
stored row-major with the channel axis fastest (a C-contiguous numpy array
of shape (H, W, C) has exactly this layout).  Label maps are integer class
indices with 255 reserved as the ignore sentinel, following the usual
segmentation dataset convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IGNORE_LABEL = 255

# Channel std below this is treated as zero (constant vector).
SIGMA_FLOOR = 1e-12

_GRID_MAGIC = b"SLG1"
_LABEL_MAGIC = b"SLL1"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class Grid3:
    """H x W x C grid of float64 values, C-contiguous, all finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"Grid3 needs a (H, W, C) array, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"Grid3 dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Grid3 values must be finite (no NaN/Inf)")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, height: int, width: int, channels: int, flat) -> "Grid3":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != height * width * channels:
            raise ValueError(
                f"flat data has {flat.size} values, expected "
                f"{height}*{width}*{channels} = {height * width * channels}"
            )
        return cls(flat.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def pixel_vector(self, i: int, j: int) -> np.ndarray:
        """The C channel values at pixel (i, j). Read access only."""
        if not (0 <= i < self.height and 0 <= j < self.width):
            raise IndexError(
                f"pixel ({i}, {j}) outside {self.height}x{self.width} grid"
            )
        return self.data[i, j]

    def flat(self) -> np.ndarray:
        """Row-major, channel-fastest view of the data."""
        return self.data.reshape(-1)


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """H x W integer class labels; 255 (IGNORE_LABEL) marks excluded pixels."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValueError(f"LabelGrid needs a (H, W) array, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"LabelGrid dimensions must be positive, got {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("labels must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "labels", np.ascontiguousarray(arr))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def validate_classes(self, classes: int) -> None:
        """Every non-ignore label must be a class index below `classes`."""
        lab = self.labels
        bad = lab[(lab != IGNORE_LABEL) & (lab >= classes)]
        if bad.size:
            raise ValueError(
                f"label {int(bad[0])} out of range for {classes} classes"
            )


def pixel_vector(grid: Grid3, i: int, j: int) -> np.ndarray:
    """Free-function alias of Grid3.pixel_vector."""
    return grid.pixel_vector(i, j)


def standard_score_normalize(v: np.ndarray) -> np.ndarray:
    """(v - mean) / population-std across the class channels.

    A constant vector (std below SIGMA_FLOOR) maps to all zeros so that a
    freshly initialized network emitting constant logits yields a uniform
    softmax downstream instead of crashing.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("standard_score_normalize expects a vector of >= 2 classes")
    mu = v.mean()
    sigma = np.sqrt(((v - mu) ** 2).mean())
    if sigma < SIGMA_FLOOR:
        return np.zeros_like(v)
    return (v - mu) / sigma


def normalize_map(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel standard-score normalization of an (H, W, C) map.

    Returns (normalized, sigma, live) where sigma is the per-pixel population
    std (H, W, 1) and live flags pixels with sigma >= SIGMA_FLOOR; degenerate
    pixels come out all-zero.  sigma and live are the cache consumed by
    normalize_map_backward.
    """
    if values.ndim != 3 or values.shape[2] < 2:
        raise ValueError("normalize_map expects an (H, W, C>=2) array")
    mu = values.mean(axis=2, keepdims=True)
    centered = values - mu
    sigma = np.sqrt((centered**2).mean(axis=2, keepdims=True))
    live = sigma >= SIGMA_FLOOR
    safe = np.where(live, sigma, 1.0)
    normalized = np.where(live, centered / safe, 0.0)
    return normalized, sigma, live


def normalize_map_backward(
    grad_out: np.ndarray,
    normalized: np.ndarray,
    sigma: np.ndarray,
    live: np.ndarray,
) -> np.ndarray:
    """Adjoint of normalize_map.

    Each output channel depends on every input channel through the pixel
    mean and std; with y = (x - mu)/sigma the exact chain is

        dL/dx = (g - mean(g) - y * mean(g * y)) / sigma

    taken per pixel.  Degenerate (constant) pixels get zero gradient.
    """
    g_mean = grad_out.mean(axis=2, keepdims=True)
    gy_mean = (grad_out * normalized).mean(axis=2, keepdims=True)
    safe = np.where(live, sigma, 1.0)
    grad_in = (grad_out - g_mean - normalized * gy_mean) / safe
    return np.where(live, grad_in, 0.0)


def save_grid(grid: Grid3, path) -> None:
    """Write the SLG1 binary format: 16-byte header + little-endian f64 data."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_GRID_MAGIC, grid.height, grid.width, grid.channels))
        fh.write(grid.data.astype("<f8").tobytes())


def load_grid(path) -> Grid3:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated grid file")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != _GRID_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_GRID_MAGIC!r}")
    expected = _HEADER.size + h * w * c * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return Grid3.from_flat(h, w, c, flat)


def save_labels(labels: LabelGrid, path) -> None:
    """Write the SLL1 binary format: header as SLG1 (channels=1) + u8 labels."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_LABEL_MAGIC, labels.height, labels.width, 1))
        fh.write(labels.labels.tobytes())


def load_labels(path) -> LabelGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated label file")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != _LABEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_LABEL_MAGIC!r}")
    if c != 1:
        raise ValueError(f"{path}: label files carry one channel, header says {c}")
    expected = _HEADER.size + h * w
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
    return LabelGrid(flat.reshape(h, w).copy())
