"""Training loop, SGD with momentum, mean-IoU evaluation, checkpoints.

Runs are deterministic: every random draw is seeded through derive_seed
from the run seed, reductions are fixed-order, and repeated runs of the
same config produce byte-identical metrics logs.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig, make_loss_fn
from .grid import Grid3, IGNORE_LABEL, LabelGrid, load_grid, save_grid
from .losses import update_centers
from .net import ConvLayer, TinyNet, net_backward, net_forward, net_forward_cached
from .synthdata import SCALE_RANGE, Sample, augment, generate_sample


class TrainingDivergedError(RuntimeError):
    """Non-finite loss encountered; carries a diagnostic snapshot."""

    def __init__(self, iteration: int, loss: float, grad_norm: float):
        super().__init__(
            f"non-finite loss at iteration {iteration}: "
            f"loss={loss}, grad_norm={grad_norm}"
        )
        self.iteration = iteration
        self.loss = loss
        self.grad_norm = grad_norm


class CheckpointError(RuntimeError):
    """Checkpoint manifest or blob fails integrity checks."""


def derive_seed(base: int, *tags) -> int:
    """Stable 63-bit seed derived from the run seed and a tag path."""
    entropy = [base & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(int.from_bytes(tag.encode("utf-8"), "little"))
        else:
            entropy.append(int(tag) & 0xFFFFFFFFFFFFFFFF)
    words = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(words[0]) << 31) ^ int(words[1])


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TrainState:
    net: TinyNet
    momentum_buffers: list
    base_lr: float
    momentum: float
    decay_rate: float
    decay_interval: int
    iteration: int = 0

    @classmethod
    def create(cls, net, lr, momentum, decay_rate, decay_interval):
        return cls(
            net=net,
            momentum_buffers=[np.zeros_like(p) for p in net.parameters()],
            base_lr=lr,
            momentum=momentum,
            decay_rate=decay_rate,
            decay_interval=decay_interval,
        )

    @property
    def lr(self) -> float:
        """Step decay: the base rate shrinks by decay_rate every interval."""
        return self.base_lr * self.decay_rate ** (self.iteration // self.decay_interval)


def sgd_step(state: TrainState, grads: list) -> TrainState:
    """buffer <- momentum * buffer + grad;  param <- param - lr * buffer."""
    params = state.net.parameters()
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
    lr = state.lr
    for param, buf, grad in zip(params, state.momentum_buffers, grads):
        if param.shape != grad.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter {param.shape}"
            )
        buf *= state.momentum
        buf += grad
        param -= lr * buf
    state.iteration += 1
    return state


# ---------------------------------------------------------------------------
# Mean IoU
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IoUReport:
    """Per-class IoU (NaN where the class has an empty union) and their mean.

    mean_iou averages only the present classes and is NaN when no class is
    present at all (an all-ignore evaluation).
    """

    per_class_iou: np.ndarray
    mean_iou: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.mean_iou)

    def to_json_dict(self) -> dict:
        return {
            "per_class_iou": [
                None if math.isnan(v) else v for v in self.per_class_iou.tolist()
            ],
            "mean_iou": None if not self.defined else self.mean_iou,
        }


class ConfusionAccumulator:
    """Running confusion matrix over (label, argmax-prediction) pairs."""

    def __init__(self, classes: int):
        if classes < 1:
            raise ValueError("classes must be >= 1")
        self.classes = classes
        self.matrix = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred: Grid3, labels: LabelGrid) -> None:
        if (pred.height, pred.width) != (labels.height, labels.width):
            raise ValueError("prediction and label shapes differ")
        if pred.channels != self.classes:
            raise ValueError(
                f"prediction has {pred.channels} channels, accumulator expects "
                f"{self.classes}"
            )
        labels.validate_classes(self.classes)
        hard = pred.data.argmax(axis=2)
        lab = labels.labels.astype(np.int64)
        valid = lab != IGNORE_LABEL
        combined = lab[valid] * self.classes + hard[valid]
        counts = np.bincount(combined, minlength=self.classes * self.classes)
        self.matrix += counts.reshape(self.classes, self.classes)

    def report(self) -> IoUReport:
        inter = np.diag(self.matrix).astype(np.float64)
        union = (
            self.matrix.sum(axis=0) + self.matrix.sum(axis=1) - np.diag(self.matrix)
        ).astype(np.float64)
        present = union > 0
        iou = np.full(self.classes, np.nan)
        iou[present] = inter[present] / union[present]
        mean = float(iou[present].mean()) if present.any() else float("nan")
        return IoUReport(per_class_iou=iou, mean_iou=mean)


def mean_iou(pred: Grid3, labels: LabelGrid) -> IoUReport:
    """Hard-argmax IoU per class over non-ignore pixels; classes with an
    empty union are excluded from the mean."""
    acc = ConfusionAccumulator(pred.channels)
    acc.update(pred, labels)
    return acc.report()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_FORMAT = "segloss-checkpoint-v1"


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(directory, net: TinyNet, iteration: int) -> str:
    """Write parameter blobs (flat grid files) plus a manifest with digests."""
    os.makedirs(directory, exist_ok=True)
    layers = []
    for idx, layer in enumerate(net.layers):
        entry = {"relu": layer.relu}
        for name, arr in (("weights", layer.weights), ("bias", layer.bias)):
            fname = f"layer{idx}_{name}.slg"
            path = os.path.join(directory, fname)
            save_grid(Grid3(arr.reshape(1, 1, -1)), path)
            entry[name] = {
                "file": fname,
                "shape": list(arr.shape),
                "sha256": _sha256(path),
            }
        layers.append(entry)
    manifest = {
        "format": _CHECKPOINT_FORMAT,
        "iteration": iteration,
        "layers": layers,
    }
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_checkpoint(manifest_path) -> tuple[TinyNet, int]:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != _CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}"
        )
    directory = os.path.dirname(os.path.abspath(manifest_path))
    layers = []
    for entry in manifest["layers"]:
        arrays = {}
        for name in ("weights", "bias"):
            meta = entry[name]
            path = os.path.join(directory, meta["file"])
            if not os.path.exists(path):
                raise CheckpointError(f"checkpoint blob missing: {meta['file']}")
            if _sha256(path) != meta["sha256"]:
                raise CheckpointError(f"checkpoint blob corrupt: {meta['file']}")
            arrays[name] = load_grid(path).flat().reshape(meta["shape"])
        layers.append(ConvLayer(arrays["weights"], arrays["bias"], relu=entry["relu"]))
    return TinyNet(layers), int(manifest["iteration"])


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ExperimentReport:
    records: list
    final_loss: float
    final_iou: IoUReport
    iterations: int

    def summary_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_loss": self.final_loss,
            "final_mean_iou": self.final_iou.to_json_dict()["mean_iou"],
            "per_class_iou": self.final_iou.to_json_dict()["per_class_iou"],
        }


@dataclass(eq=False)
class TrainedExperiment:
    """Experiment report plus the trained network it produced."""

    report: ExperimentReport
    net: TinyNet


def make_eval_set(cfg: RunConfig) -> list[Sample]:
    """The held-out seeded evaluation scenes for a run config."""
    return [
        generate_sample(replace(cfg.scene, seed=derive_seed(cfg.seed, "eval", i)))
        for i in range(cfg.trainer.eval_samples)
    ]


def build_net(cfg: RunConfig) -> TinyNet:
    return TinyNet.create(
        in_channels=3, classes=cfg.scene.classes, seed=derive_seed(cfg.seed, "init")
    )


def evaluate_net(net: TinyNet, eval_set: list[Sample]) -> IoUReport:
    acc = ConfusionAccumulator(net.out_channels)
    for sample in eval_set:
        acc.update(net_forward(net, sample.image), sample.labels)
    return acc.report()


def _train_sample(cfg: RunConfig, index: int) -> Sample:
    scene = replace(cfg.scene, seed=derive_seed(cfg.seed, "train", index))
    sample = generate_sample(scene)
    if cfg.trainer.augment:
        rng = np.random.default_rng(derive_seed(cfg.seed, "aug", index))
        scale = float(rng.uniform(*SCALE_RANGE))
        hflip = bool(rng.integers(2))
        sample = augment(
            sample,
            scale,
            hflip,
            cfg.scene.height,
            cfg.scene.width,
            seed=derive_seed(cfg.seed, "crop", index),
        )
    return sample


def run_experiment(cfg: RunConfig, metrics_path=None) -> ExperimentReport:
    """Train the tiny net against the configured loss; deterministic per seed.

    Emits one metrics record per iteration ({iteration, loss, lr} plus
    mean_iou at eval intervals and at the last iteration) after an initial
    iteration-0 record, and aborts with a diagnostic snapshot if the loss
    goes non-finite.
    """
    return run_experiment_trained(cfg, metrics_path).report


def run_experiment_trained(cfg: RunConfig, metrics_path=None) -> TrainedExperiment:
    """run_experiment variant that also hands back the trained network."""
    settings = cfg.trainer
    net = build_net(cfg)
    loss_fn, center_cfg = make_loss_fn(cfg)
    eval_set = make_eval_set(cfg)
    state = TrainState.create(
        net,
        lr=settings.lr,
        momentum=settings.momentum,
        decay_rate=settings.decay_rate,
        decay_interval=settings.decay_interval,
    )

    records = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def emit(record: dict) -> None:
        records.append(record)
        if sink:
            sink.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        probe = _train_sample(cfg, 0)
        probe_out = loss_fn(net_forward(net, probe.image), probe.labels)
        iou = evaluate_net(net, eval_set)
        emit(
            {
                "iteration": 0,
                "loss": probe_out.loss,
                "lr": state.lr,
                "mean_iou": iou.mean_iou if iou.defined else None,
            }
        )
        final_loss = probe_out.loss

        for it in range(1, settings.iterations + 1):
            lr_used = state.lr
            grads = None
            loss_sum = 0.0
            batch = []
            for b in range(settings.batch_size):
                index = (it - 1) * settings.batch_size + b + 1
                sample = _train_sample(cfg, index)
                pred, cache = net_forward_cached(net, sample.image)
                out = loss_fn(pred, sample.labels)
                if not math.isfinite(out.loss):
                    raise TrainingDivergedError(
                        it, out.loss, float(np.linalg.norm(out.grad.data))
                    )
                param_grads, _ = net_backward(net, cache, out.grad)
                if grads is None:
                    grads = param_grads
                else:
                    for acc, g in zip(grads, param_grads):
                        acc += g
                loss_sum += out.loss
                batch.append((pred, sample.labels))
            if settings.batch_size > 1:
                for g in grads:
                    g /= settings.batch_size
            sgd_step(state, grads)
            if center_cfg is not None:
                for pred, labels in batch:
                    update_centers(pred, labels, center_cfg)

            final_loss = loss_sum / settings.batch_size
            record = {"iteration": it, "loss": final_loss, "lr": lr_used}
            if it % settings.eval_interval == 0 or it == settings.iterations:
                iou = evaluate_net(net, eval_set)
                record["mean_iou"] = iou.mean_iou if iou.defined else None
            emit(record)
    finally:
        if sink:
            sink.close()

    report = ExperimentReport(
        records=records,
        final_loss=final_loss,
        final_iou=iou,
        iterations=settings.iterations,
    )
    return TrainedExperiment(report=report, net=net)
