"""The locally adaptive loss and its three counterpart losses.

All four losses share one contract: they map a raw prediction map plus a
label map to a scalar loss, a gradient grid of the same shape as the raw
predictions, per-pixel loss values (zero at ignored pixels), and the count
of valid pixels.  Forward and backward are computed in a single pass with
retained intermediates.

The adaptive loss pipeline is: per-pixel standard-score normalization (on
by default), label-selective neighborhood pooling, softmax cross-entropy at
every valid center against the center's label, then Minkowski (power-mean)
pooling with exponent k over the valid set.  k > 1 shifts weight toward
high-loss pixels, which is the loss's class-imbalance mechanism.

The counterpart losses (plain softmax CE, focal, center) operate on raw
per-pixel vectors with no filter, as whole-loss substitutes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .filters import FilterSpec, selective_pool, selective_pool_adjoint
from .grid import (
    IGNORE_LABEL,
    Grid3,
    LabelGrid,
    normalize_map,
    normalize_map_backward,
)

# Floor for log/division arguments near a saturated softmax.
_PT_FLOOR = 1e-15


@dataclass(frozen=True, eq=False)
class LossOutput:
    """Scalar loss, gradient w.r.t. the raw prediction map, and diagnostics."""

    loss: float
    grad: Grid3
    per_pixel_losses: np.ndarray
    valid_count: int

    @property
    def degenerate(self) -> bool:
        """True when no pixel emitted a loss (an all-ignore batch)."""
        return self.valid_count == 0

    def to_json_dict(self) -> dict:
        return {
            "loss": self.loss,
            "valid_count": self.valid_count,
            "grad_norm": float(np.linalg.norm(self.grad.data)),
        }


@dataclass(frozen=True)
class AdaptiveLossConfig:
    filter: FilterSpec
    k: float = 3.0
    normalize_inputs: bool = True

    def __post_init__(self):
        if not self.k >= 1.0:
            raise ValueError(f"Minkowski exponent k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"focal alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass
class CenterLossConfig:
    """Per-class center vectors in score space plus the update/weight rates.

    centers is mutable state, one row per class; the trainer refreshes it
    with update_centers after each iteration.
    """

    alpha: float = 0.5
    lam: float = 3e-4
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"center alpha must be in (0, 1], got {self.alpha}")
        if self.lam < 0.0:
            raise ValueError(f"center lambda must be >= 0, got {self.lam}")
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("center rows must be finite")

    @classmethod
    def zeros(cls, classes: int, alpha: float = 0.5, lam: float = 3e-4):
        return cls(alpha=alpha, lam=lam, centers=np.zeros((classes, classes)))


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    z = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_local(f: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(f) against one class index.

    Returns (loss, grad) with loss = -log softmax(f)[label] and
    grad = softmax(f) - onehot(label).
    """
    f = np.asarray(f, dtype=np.float64)
    if not 0 <= label < f.size:
        raise ValueError(f"label {label} out of range for {f.size} classes")
    z = f - f.max()
    lse = np.log(np.exp(z).sum())
    loss = float(lse - z[label])
    grad = np.exp(z - lse)
    grad[label] -= 1.0
    return loss, grad


def _valid_labels(labels: LabelGrid, classes: int) -> tuple[np.ndarray, np.ndarray]:
    """(valid mask, labels clamped to 0 where invalid) as int arrays."""
    labels.validate_classes(classes)
    lab = labels.labels.astype(np.int64)
    valid = lab != IGNORE_LABEL
    return valid, np.where(valid, lab, 0)


def _ce_map(logits: np.ndarray, lab_safe: np.ndarray):
    """Per-pixel CE losses and softmax probabilities for an (H, W, C) map."""
    z = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=2, keepdims=True)
    probs = e / se
    z_label = np.take_along_axis(z, lab_safe[..., None], axis=2)[..., 0]
    losses = np.log(se[..., 0]) - z_label
    return losses, probs


def _ce_grad(probs: np.ndarray, lab_safe: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """(softmax - onehot) per pixel, scaled by an (H, W) factor."""
    grad = probs * scale[..., None]
    picked = np.take_along_axis(grad, lab_safe[..., None], axis=2)
    np.put_along_axis(grad, lab_safe[..., None], picked - scale[..., None], axis=2)
    return grad


def _degenerate(pred: Grid3) -> LossOutput:
    return LossOutput(
        loss=0.0,
        grad=Grid3(np.zeros(pred.shape)),
        per_pixel_losses=np.zeros((pred.height, pred.width)),
        valid_count=0,
    )


def _power_mean(losses: np.ndarray, k: float) -> tuple[float, float]:
    """((1/M) sum l^k)^(1/k) over a 1-D array, plus the inner mean."""
    inner = float(np.mean(losses**k))
    return inner ** (1.0 / k), inner


def adaptive_loss(
    pred_raw: Grid3, labels: LabelGrid, cfg: AdaptiveLossConfig
) -> LossOutput:
    """Forward and backward of the locally adaptive loss in one pass.

    The gradient of the power mean w.r.t. one per-pixel loss l_p is derived
    directly:  with S = (1/M) sum l^k and L = S^(1/k),

        dL/dl_p = S^(1/k - 1) * l_p^(k-1) / M

    (the 1/k from the outer power cancels against the k of the inner one).
    The per-pixel CE gradient then routes through the pooling adjoint and,
    when normalization is on, the full standard-score Jacobian.
    """
    spec = cfg.filter
    if cfg.normalize_inputs:
        normalized, sigma, live = normalize_map(pred_raw.data)
    else:
        normalized = pred_raw.data

    merged = selective_pool(Grid3(normalized), labels, spec)
    valid = merged.valid_mask
    m_p = int(valid.sum())
    if m_p == 0:
        return _degenerate(pred_raw)

    _, lab_safe = _valid_labels(labels, spec.classes)
    losses, probs = _ce_map(merged.values.data, lab_safe)
    losses = np.where(valid, losses, 0.0)

    valid_losses = losses[valid]
    loss, inner = _power_mean(valid_losses, cfg.k)

    # dL/dl per pixel; at inner == 0 every valid loss is exactly zero and the
    # k > 1 derivative vanishes (k = 1 reduces to the plain mean gradient).
    if inner > 0.0:
        coeff = inner ** (1.0 / cfg.k - 1.0) / m_p
        dl = coeff * np.where(valid, losses ** (cfg.k - 1.0), 0.0)
    elif cfg.k == 1.0:
        dl = np.where(valid, 1.0 / m_p, 0.0)
    else:
        dl = np.zeros_like(losses)

    grad_merged = _ce_grad(probs, lab_safe, np.where(valid, dl, 0.0))
    grad_norm_space = selective_pool_adjoint(Grid3(grad_merged), labels, spec).data
    if cfg.normalize_inputs:
        grad_raw = normalize_map_backward(grad_norm_space, normalized, sigma, live)
    else:
        grad_raw = grad_norm_space

    return LossOutput(
        loss=loss,
        grad=Grid3(grad_raw),
        per_pixel_losses=losses,
        valid_count=m_p,
    )


def plain_softmax_ce(pred_raw: Grid3, labels: LabelGrid) -> LossOutput:
    """Per-pixel softmax cross-entropy on raw vectors, mean over valid pixels."""
    _check_pair(pred_raw, labels)
    valid, lab_safe = _valid_labels(labels, pred_raw.channels)
    m_p = int(valid.sum())
    if m_p == 0:
        return _degenerate(pred_raw)

    losses, probs = _ce_map(pred_raw.data, lab_safe)
    losses = np.where(valid, losses, 0.0)
    scale = np.where(valid, 1.0 / m_p, 0.0)
    grad = _ce_grad(probs, lab_safe, scale)
    return LossOutput(
        loss=float(losses.sum() / m_p),
        grad=Grid3(grad),
        per_pixel_losses=losses,
        valid_count=m_p,
    )


def focal_loss(pred_raw: Grid3, labels: LabelGrid, cfg: FocalConfig) -> LossOutput:
    """Focal loss per pixel: -alpha * (1 - p_t)^gamma * log(p_t), mean over valid.

    p_t is the softmax probability of the true class.  A pixel with p_t
    numerically 1 contributes zero loss and zero gradient.
    """
    _check_pair(pred_raw, labels)
    valid, lab_safe = _valid_labels(labels, pred_raw.channels)
    m_p = int(valid.sum())
    if m_p == 0:
        return _degenerate(pred_raw)

    probs = softmax(pred_raw.data)
    p_t = np.take_along_axis(probs, lab_safe[..., None], axis=2)[..., 0]
    p_c = np.maximum(p_t, _PT_FLOOR)
    omp = 1.0 - p_t  # (1 - p_t), exactly 0 at saturated pixels
    log_p = np.log(p_c)

    losses = np.where(valid, -cfg.alpha * omp**cfg.gamma * log_p, 0.0)

    # d(loss_pixel)/dp_t, with the saturated case forced to zero.
    if cfg.gamma == 0.0:
        dldp = -cfg.alpha / p_c
    else:
        saturated = omp < _PT_FLOOR
        omp_safe = np.where(saturated, 1.0, omp)
        dldp = (
            cfg.alpha * cfg.gamma * omp_safe ** (cfg.gamma - 1.0) * log_p
            - cfg.alpha * omp_safe**cfg.gamma / p_c
        )
        dldp = np.where(saturated, 0.0, dldp)

    # dp_t/dx_j = p_t * (onehot_j - softmax_j); chain and average over M.
    scale = np.where(valid, dldp * p_t / m_p, 0.0)
    grad = -probs * scale[..., None]
    picked = np.take_along_axis(grad, lab_safe[..., None], axis=2)
    np.put_along_axis(grad, lab_safe[..., None], picked + scale[..., None], axis=2)

    return LossOutput(
        loss=float(losses.sum() / m_p),
        grad=Grid3(grad),
        per_pixel_losses=losses,
        valid_count=m_p,
    )


def center_loss(pred_raw: Grid3, labels: LabelGrid, cfg: CenterLossConfig) -> LossOutput:
    """Plain CE plus (lam/2) * mean squared distance to the own-class center.

    Centers live in score space (one C-vector per class).  This computes
    loss and gradient only; update_centers is the separate explicit step.
    """
    _check_pair(pred_raw, labels)
    _check_centers(pred_raw, cfg)
    valid, lab_safe = _valid_labels(labels, pred_raw.channels)
    m_p = int(valid.sum())
    if m_p == 0:
        return _degenerate(pred_raw)

    base = plain_softmax_ce(pred_raw, labels)
    diff = np.where(valid[..., None], pred_raw.data - cfg.centers[lab_safe], 0.0)
    sq_dist = (diff**2).sum(axis=2)
    penalty = np.where(valid, 0.5 * cfg.lam * sq_dist, 0.0)

    grad = base.grad.data + cfg.lam * diff / m_p
    return LossOutput(
        loss=base.loss + float(penalty.sum() / m_p),
        grad=Grid3(grad),
        per_pixel_losses=base.per_pixel_losses + penalty,
        valid_count=m_p,
    )


def update_centers(pred_raw: Grid3, labels: LabelGrid, cfg: CenterLossConfig) -> None:
    """Explicit center refresh, mutating cfg.centers:

        c_j <- c_j - alpha * sum_{i: y_i = j} (c_j - x_i) / (1 + n_j)

    Classes with no member pixels this batch stay unchanged.
    """
    _check_pair(pred_raw, labels)
    _check_centers(pred_raw, cfg)
    valid, lab_safe = _valid_labels(labels, pred_raw.channels)
    x = pred_raw.data
    for j in range(cfg.centers.shape[0]):
        members = valid & (lab_safe == j)
        n_j = int(members.sum())
        if n_j == 0:
            continue
        summed = (cfg.centers[j][None, :] - x[members]).sum(axis=0)
        cfg.centers[j] -= cfg.alpha * summed / (1.0 + n_j)


def _check_pair(pred: Grid3, labels: LabelGrid) -> None:
    if (pred.height, pred.width) != (labels.height, labels.width):
        raise ValueError(
            f"prediction map {pred.height}x{pred.width} does not match "
            f"label map {labels.height}x{labels.width}"
        )


def _check_centers(pred: Grid3, cfg: CenterLossConfig) -> None:
    if cfg.centers.shape != (pred.channels, pred.channels):
        raise ValueError(
            f"centers must be ({pred.channels}, {pred.channels}) for this map, "
            f"got {cfg.centers.shape}"
        )
