"""Seeded synthetic segmentation scenes: colored shapes on a background.

Stands in for a real segmentation dataset at desk scale.  Shape classes are
drawn from a Zipf-like distribution over classes 1..C-1 so experiments have
a long-tailed class histogram to act on; class 0 is always background.
Identical SceneSpec values produce bit-identical samples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .grid import IGNORE_LABEL, Grid3, LabelGrid

SHAPE_KINDS = ("rectangle", "disk")

SCALE_RANGE = (0.5, 1.5)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    classes: int = 6
    num_shapes: int = 5
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    class_frequency_skew: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.num_shapes < 0:
            raise ValueError(f"num_shapes must be >= 0, got {self.num_shapes}")
        kinds = tuple(self.shape_kinds)
        for kind in kinds:
            if kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {kind!r}")
        if self.num_shapes > 0 and not kinds:
            raise ValueError("shape_kinds must be non-empty when num_shapes > 0")
        if self.class_frequency_skew < 0:
            raise ValueError("class_frequency_skew must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        object.__setattr__(self, "shape_kinds", kinds)


@dataclass(frozen=True, eq=False)
class Sample:
    image: Grid3
    labels: LabelGrid


@dataclass(frozen=True)
class Shape:
    kind: str
    cls: int
    row: int
    col: int
    half_h: int
    half_w: int


def shape_class_probs(classes: int, skew: float) -> np.ndarray:
    """Zipf-like draw probabilities for classes 1..C-1: p(c) proportional to
    c^(-skew).  skew = 0 is uniform; larger values lengthen the tail."""
    ranks = np.arange(1, classes, dtype=np.float64)
    weights = ranks**-skew
    return weights / weights.sum()


def _draw_shapes(rng: np.random.Generator, spec: SceneSpec) -> list[Shape]:
    probs = shape_class_probs(spec.classes, spec.class_frequency_skew)
    lo = max(2, round(0.08 * min(spec.height, spec.width)))
    hi = max(lo, round(0.25 * min(spec.height, spec.width)))
    shapes = []
    for _ in range(spec.num_shapes):
        cls = int(rng.choice(np.arange(1, spec.classes), p=probs))
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        row = int(rng.integers(spec.height))
        col = int(rng.integers(spec.width))
        if kind == "rectangle":
            half_h = int(rng.integers(lo, hi + 1))
            half_w = int(rng.integers(lo, hi + 1))
        else:
            radius = int(rng.integers(lo, hi + 1))
            half_h = half_w = radius
        shapes.append(Shape(kind, cls, row, col, half_h, half_w))
    return shapes


def scene_shapes(spec: SceneSpec) -> list[Shape]:
    """The seeded shape draws behind generate_sample, exposed for inspection
    and for statistical tests of the class distribution."""
    return _draw_shapes(np.random.default_rng(spec.seed), spec)


def class_colors(classes: int) -> np.ndarray:
    """One distinct base color per class, mapped into [0.12, 0.88] so additive
    noise is not flattened against the [0, 1] clip."""
    base = voc_palette()[:classes].astype(np.float64) / 255.0
    return 0.12 + 0.76 * base


def generate_sample(spec: SceneSpec) -> Sample:
    """Paint seeded shapes over a background, later shapes occluding earlier
    ones, then add Gaussian pixel noise.  Labels match the paint exactly."""
    rng = np.random.default_rng(spec.seed)
    shapes = _draw_shapes(rng, spec)

    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for shape in shapes:
        r0 = max(0, shape.row - shape.half_h)
        r1 = min(spec.height, shape.row + shape.half_h + 1)
        c0 = max(0, shape.col - shape.half_w)
        c1 = min(spec.width, shape.col + shape.half_w + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        if shape.kind == "rectangle":
            labels[r0:r1, c0:c1] = shape.cls
        else:
            rr = np.arange(r0, r1)[:, None] - shape.row
            cc = np.arange(c0, c1)[None, :] - shape.col
            inside = rr**2 + cc**2 <= shape.half_h**2
            region = labels[r0:r1, c0:c1]
            region[inside] = shape.cls

    image = class_colors(spec.classes)[labels]
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, image.shape)
        image = np.clip(image, 0.0, 1.0)
    return Sample(Grid3(image), LabelGrid(labels))


def _nn_indices(out_len: int, scale: float, in_len: int) -> np.ndarray:
    # Sample source pixel centers; scale = 1 maps index to itself.
    src = ((np.arange(out_len) + 0.5) / scale).astype(np.int64)
    return np.minimum(src, in_len - 1)


def augment(
    sample: Sample,
    scale: float,
    hflip: bool,
    out_h: int,
    out_w: int,
    seed: int,
) -> Sample:
    """Nearest-neighbor rescale, optional mirror, then seeded crop or pad.

    Labels are resampled by nearest neighbor only (class indices must never
    be interpolated) and padding fills them with the ignore sentinel; the
    image pads with zeros.
    """
    if not SCALE_RANGE[0] <= scale <= SCALE_RANGE[1]:
        raise ValueError(f"scale must be in {list(SCALE_RANGE)}, got {scale}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")

    img = sample.image.data
    lab = sample.labels.labels
    in_h, in_w = lab.shape

    new_h = max(1, round(in_h * scale))
    new_w = max(1, round(in_w * scale))
    ri = _nn_indices(new_h, scale, in_h)
    ci = _nn_indices(new_w, scale, in_w)
    img = img[ri][:, ci]
    lab = lab[ri][:, ci]

    if hflip:
        img = img[:, ::-1]
        lab = lab[:, ::-1]

    rng = np.random.default_rng(seed)
    out_img = np.zeros((out_h, out_w, img.shape[2]))
    out_lab = np.full((out_h, out_w), IGNORE_LABEL, dtype=np.uint8)

    # Per axis: crop at a random offset when content is larger than the
    # target, otherwise place it at a random offset inside the padding.
    if new_h >= out_h:
        src_r = int(rng.integers(new_h - out_h + 1))
        dst_r, span_h = 0, out_h
    else:
        src_r = 0
        dst_r = int(rng.integers(out_h - new_h + 1))
        span_h = new_h
    if new_w >= out_w:
        src_c = int(rng.integers(new_w - out_w + 1))
        dst_c, span_w = 0, out_w
    else:
        src_c = 0
        dst_c = int(rng.integers(out_w - new_w + 1))
        span_w = new_w

    out_img[dst_r : dst_r + span_h, dst_c : dst_c + span_w] = img[
        src_r : src_r + span_h, src_c : src_c + span_w
    ]
    out_lab[dst_r : dst_r + span_h, dst_c : dst_c + span_w] = lab[
        src_r : src_r + span_h, src_c : src_c + span_w
    ]
    return Sample(Grid3(out_img), LabelGrid(out_lab))


def voc_palette() -> np.ndarray:
    """The 256-entry Pascal VOC color table (bit-reversal construction)."""
    palette = np.zeros((256, 3), dtype=np.uint8)
    for idx in range(256):
        cid = idx
        r = g = b = 0
        for bit in range(8):
            r |= ((cid >> 0) & 1) << (7 - bit)
            g |= ((cid >> 1) & 1) << (7 - bit)
            b |= ((cid >> 2) & 1) << (7 - bit)
            cid >>= 3
        palette[idx] = (r, g, b)
    return palette


def save_label_png(labels: LabelGrid, path) -> None:
    """Write labels as a paletted PNG; palette indices are class indices."""
    img = Image.fromarray(labels.labels, mode="P")
    img.putpalette(voc_palette().reshape(-1).tolist())
    img.save(path, format="PNG")


def load_label_png(path) -> LabelGrid:
    img = Image.open(path)
    if img.mode != "P":
        raise ValueError(f"{path}: expected a paletted PNG, got mode {img.mode}")
    return LabelGrid(np.asarray(img, dtype=np.uint8))


def standard_scene(seed: int, **overrides) -> SceneSpec:
    """The default desk-scale task: 64x64, 6 classes, skewed shape classes."""
    base = SceneSpec(
        height=64,
        width=64,
        classes=6,
        num_shapes=5,
        shape_kinds=SHAPE_KINDS,
        class_frequency_skew=1.0,
        noise_std=0.25,
        seed=seed,
    )
    return replace(base, **overrides) if overrides else base
