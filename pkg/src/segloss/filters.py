"""Label-selective, distance-weighted neighborhood pooling and its adjoint.

The filter slides a square window over the prediction map and, at each
center pixel, averages the prediction vectors of in-window neighbors that
carry the *same* label as the center.  Neighbors are weighted by a
power-of-two decay in their chessboard distance to the center (weight 2 at
the center itself, 1 at distance 1, 0.5 at distance 2, ...).  The weighted
sum is divided by the plain match count, exactly as written: weights are
not renormalized, so a lone pixel pools to twice its own vector.

Windows are clipped at the image border; out-of-image offsets contribute
nothing and do not count toward the support count.  Ignore-labelled pixels
are excluded both as centers (no output) and as neighbors (never match).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .grid import IGNORE_LABEL, Grid3, LabelGrid


class WeightSchedule(Enum):
    CHESSBOARD_POW2 = "chessboard_pow2"
    UNIFORM = "uniform"


def chessboard_weight(u: int, v: int) -> float:
    """2^(1 - D8) where D8 = max(|u|, |v|): 2 at the center, halving per ring."""
    return 2.0 ** (1 - max(abs(u), abs(v)))


@dataclass(frozen=True)
class FilterSpec:
    """Window geometry and weighting of the selective pooling filter."""

    window: int
    classes: int
    stride: int = 1
    weight_schedule: WeightSchedule = WeightSchedule.CHESSBOARD_POW2

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and positive, got {self.window}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.classes < 1:
            raise ValueError(f"classes must be >= 1, got {self.classes}")
        if not isinstance(self.weight_schedule, WeightSchedule):
            object.__setattr__(
                self, "weight_schedule", WeightSchedule(self.weight_schedule)
            )

    def weight(self, u: int, v: int) -> float:
        if self.weight_schedule is WeightSchedule.UNIFORM:
            return 1.0
        return chessboard_weight(u, v)

    def offsets(self):
        """All (u, v, weight) triples of the window."""
        r = (self.window - 1) // 2
        return [
            (u, v, self.weight(u, v))
            for u in range(-r, r + 1)
            for v in range(-r, r + 1)
        ]


@dataclass(frozen=True, eq=False)
class MergedMap:
    """Filter output: merged vectors, per-pixel support counts, validity.

    values are all-zero wherever valid_mask is false (ignore-labelled or
    off-stride centers); support_counts is zero there too and >= 1 at every
    valid pixel since the center always matches its own label.
    """

    values: Grid3
    support_counts: np.ndarray
    valid_mask: np.ndarray


def _check_shapes(pred: Grid3, labels: LabelGrid, spec: FilterSpec) -> None:
    if (pred.height, pred.width) != (labels.height, labels.width):
        raise ValueError(
            f"prediction map {pred.height}x{pred.width} does not match "
            f"label map {labels.height}x{labels.width}"
        )
    if pred.channels != spec.classes:
        raise ValueError(
            f"prediction map has {pred.channels} channels, filter expects "
            f"{spec.classes}"
        )
    labels.validate_classes(spec.classes)


def _valid_centers(labels: LabelGrid, stride: int) -> np.ndarray:
    """Loss-emitting centers: on the stride lattice and not ignore-labelled."""
    valid = labels.labels != IGNORE_LABEL
    if stride > 1:
        lattice = np.zeros_like(valid)
        lattice[::stride, ::stride] = True
        valid = valid & lattice
    return valid


def _offset_slices(u: int, v: int, h: int, w: int):
    """Center and neighbor index ranges for which (i+u, j+v) stays in bounds."""
    ci0, ci1 = max(0, -u), h - max(0, u)
    cj0, cj1 = max(0, -v), w - max(0, v)
    center = (slice(ci0, ci1), slice(cj0, cj1))
    neighbor = (slice(ci0 + u, ci1 + u), slice(cj0 + v, cj1 + v))
    return center, neighbor, ci0 < ci1 and cj0 < cj1


def _support_counts(lab: np.ndarray, valid: np.ndarray, spec: FilterSpec) -> np.ndarray:
    h, w = lab.shape
    counts = np.zeros((h, w), dtype=np.int64)
    for u, v, _ in spec.offsets():
        cs, ns, nonempty = _offset_slices(u, v, h, w)
        if not nonempty:
            continue
        counts[cs] += (lab[ns] == lab[cs]) & valid[cs]
    return counts


def selective_pool(pred: Grid3, labels: LabelGrid, spec: FilterSpec) -> MergedMap:
    """Merge each valid center's same-label neighborhood into one vector.

    f(i,j) = (1/count) * sum over in-window, in-bounds neighbors with the
    center's label of weight(u,v) * pred(i+u, j+v).
    """
    _check_shapes(pred, labels, spec)
    lab = labels.labels
    h, w = lab.shape
    valid = _valid_centers(labels, spec.stride)

    acc = np.zeros(pred.shape, dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.int64)
    x = pred.data
    for u, v, weight in spec.offsets():
        cs, ns, nonempty = _offset_slices(u, v, h, w)
        if not nonempty:
            continue
        match = (lab[ns] == lab[cs]) & valid[cs]
        counts[cs] += match
        acc[cs] += (weight * match)[..., None] * x[ns]

    merged = acc / np.maximum(counts, 1)[..., None]
    merged[~valid] = 0.0
    counts[~valid] = 0
    return MergedMap(Grid3(merged), counts, valid)


def selective_pool_adjoint(
    grad_merged: Grid3, labels: LabelGrid, spec: FilterSpec
) -> Grid3:
    """Exact linear transpose of selective_pool.

    Each pixel gathers, from every valid window center whose label it
    shares, that center's merged-vector gradient scaled by the mirrored
    offset weight over the center's support count.
    """
    _check_shapes(grad_merged, labels, spec)
    lab = labels.labels
    h, w = lab.shape
    valid = _valid_centers(labels, spec.stride)
    counts = _support_counts(lab, valid, spec)

    scaled = np.where(
        valid[..., None],
        grad_merged.data / np.maximum(counts, 1)[..., None],
        0.0,
    )
    out = np.zeros(grad_merged.shape, dtype=np.float64)
    for u, v, weight in spec.offsets():
        cs, ns, nonempty = _offset_slices(u, v, h, w)
        if not nonempty:
            continue
        match = (lab[ns] == lab[cs]) & valid[cs]
        out[ns] += (weight * match)[..., None] * scaled[cs]
    return Grid3(out)
