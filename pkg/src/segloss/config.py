"""Run configuration: parsing, validation, canonical serialization.

A run config is a single JSON file.  Parsing fills in documented defaults,
so serialize(parse(text)) is the canonical form and parsing is idempotent.
Validation errors always name the offending field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .filters import FilterSpec, WeightSchedule
from .losses import (
    AdaptiveLossConfig,
    CenterLossConfig,
    FocalConfig,
    adaptive_loss,
    center_loss,
    focal_loss,
    plain_softmax_ce,
)
from .synthdata import SHAPE_KINDS, SceneSpec

LOSS_NAMES = ("adaptive", "softmax_ce", "focal", "center")

WEIGHT_SCHEDULE_NAMES = tuple(s.value for s in WeightSchedule)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class TrainerSettings:
    lr: float = 2.5e-4
    momentum: float = 0.9
    decay_rate: float = 0.9
    decay_interval: int = 500
    iterations: int = 2000
    eval_interval: int = 250
    eval_samples: int = 8
    batch_size: int = 1
    augment: bool = True


@dataclass(frozen=True)
class RunConfig:
    loss: str
    loss_params: dict
    scene: SceneSpec
    trainer: TrainerSettings
    seed: int
    output_dir: str


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _take(raw: dict, allowed: dict, where: str) -> dict:
    """Fill defaults and reject unknown keys; allowed maps key -> default."""
    for key in raw:
        _require(key in allowed, f"{where}.{key}: unknown field")
    return {key: raw.get(key, default) for key, default in allowed.items()}


_LOSS_PARAM_DEFAULTS = {
    # Adaptive defaults follow the best-performing settings: window 5, k 3.
    "adaptive": {
        "k": 3.0,
        "window": 5,
        "weight_schedule": "chessboard_pow2",
        "normalize_inputs": True,
    },
    "softmax_ce": {},
    "focal": {"alpha": 0.25, "gamma": 2.0},
    "center": {"alpha": 0.5, "lambda": 3e-4},
}


def _validate_loss_params(loss: str, params: dict) -> dict:
    where = "loss_params"
    out = _take(params, _LOSS_PARAM_DEFAULTS[loss], where)
    if loss == "adaptive":
        _require(
            isinstance(out["window"], int)
            and out["window"] >= 1
            and out["window"] % 2 == 1,
            f"{where}.window: must be an odd positive integer, got {out['window']}",
        )
        _require(
            isinstance(out["k"], (int, float)) and out["k"] >= 1,
            f"{where}.k: must be a number >= 1, got {out['k']}",
        )
        out["k"] = float(out["k"])
        _require(
            out["weight_schedule"] in WEIGHT_SCHEDULE_NAMES,
            f"{where}.weight_schedule: must be one of {list(WEIGHT_SCHEDULE_NAMES)}",
        )
        _require(
            isinstance(out["normalize_inputs"], bool),
            f"{where}.normalize_inputs: must be a boolean",
        )
    elif loss == "focal":
        _require(
            isinstance(out["alpha"], (int, float)) and 0 < out["alpha"] <= 1,
            f"{where}.alpha: must be in (0, 1], got {out['alpha']}",
        )
        _require(
            isinstance(out["gamma"], (int, float)) and out["gamma"] >= 0,
            f"{where}.gamma: must be >= 0, got {out['gamma']}",
        )
        out["alpha"] = float(out["alpha"])
        out["gamma"] = float(out["gamma"])
    elif loss == "center":
        _require(
            isinstance(out["alpha"], (int, float)) and 0 < out["alpha"] <= 1,
            f"{where}.alpha: must be in (0, 1], got {out['alpha']}",
        )
        _require(
            isinstance(out["lambda"], (int, float)) and out["lambda"] >= 0,
            f"{where}.lambda: must be >= 0, got {out['lambda']}",
        )
        out["alpha"] = float(out["alpha"])
        out["lambda"] = float(out["lambda"])
    return out


def _validate_scene(raw: dict) -> SceneSpec:
    defaults = {
        "height": 64,
        "width": 64,
        "classes": 6,
        "num_shapes": 5,
        "shape_kinds": list(SHAPE_KINDS),
        "class_frequency_skew": 1.0,
        "noise_std": 0.25,
        "seed": 0,
    }
    out = _take(raw, defaults, "scene")
    for key in ("height", "width", "classes", "num_shapes", "seed"):
        _require(
            isinstance(out[key], int),
            f"scene.{key}: must be an integer, got {out[key]!r}",
        )
    for key in ("class_frequency_skew", "noise_std"):
        _require(
            isinstance(out[key], (int, float)),
            f"scene.{key}: must be a number, got {out[key]!r}",
        )
        out[key] = float(out[key])
    _require(
        isinstance(out["shape_kinds"], (list, tuple))
        and all(isinstance(k, str) for k in out["shape_kinds"]),
        "scene.shape_kinds: must be a list of strings",
    )
    try:
        return SceneSpec(
            height=out["height"],
            width=out["width"],
            classes=out["classes"],
            num_shapes=out["num_shapes"],
            shape_kinds=tuple(out["shape_kinds"]),
            class_frequency_skew=out["class_frequency_skew"],
            noise_std=out["noise_std"],
            seed=out["seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"scene: {exc}") from exc


def _validate_trainer(raw: dict) -> TrainerSettings:
    defaults = asdict(TrainerSettings())
    out = _take(raw, defaults, "trainer")
    _require(
        isinstance(out["lr"], (int, float)) and out["lr"] > 0,
        f"trainer.lr: must be > 0, got {out['lr']}",
    )
    _require(
        isinstance(out["momentum"], (int, float)) and 0 <= out["momentum"] < 1,
        f"trainer.momentum: must be in [0, 1), got {out['momentum']}",
    )
    _require(
        isinstance(out["decay_rate"], (int, float)) and 0 < out["decay_rate"] <= 1,
        f"trainer.decay_rate: must be in (0, 1], got {out['decay_rate']}",
    )
    for key in ("decay_interval", "eval_interval", "eval_samples", "batch_size"):
        _require(
            isinstance(out[key], int) and out[key] >= 1,
            f"trainer.{key}: must be an integer >= 1, got {out[key]!r}",
        )
    _require(
        isinstance(out["iterations"], int) and out["iterations"] >= 0,
        f"trainer.iterations: must be an integer >= 0, got {out['iterations']!r}",
    )
    _require(
        isinstance(out["augment"], bool),
        f"trainer.augment: must be a boolean, got {out['augment']!r}",
    )
    return TrainerSettings(
        lr=float(out["lr"]),
        momentum=float(out["momentum"]),
        decay_rate=float(out["decay_rate"]),
        decay_interval=out["decay_interval"],
        iterations=out["iterations"],
        eval_interval=out["eval_interval"],
        eval_samples=out["eval_samples"],
        batch_size=out["batch_size"],
        augment=out["augment"],
    )


def parse_config(raw: dict) -> RunConfig:
    _require(isinstance(raw, dict), "config: must be a JSON object")
    top = _take(
        raw,
        {
            "loss": "adaptive",
            "loss_params": {},
            "scene": {},
            "trainer": {},
            "seed": 0,
            "output_dir": "runs/run",
        },
        "config",
    )
    _require(
        top["loss"] in LOSS_NAMES,
        f"loss: must be one of {list(LOSS_NAMES)}, got {top['loss']!r}",
    )
    _require(isinstance(top["seed"], int), f"seed: must be an integer, got {top['seed']!r}")
    _require(
        isinstance(top["output_dir"], str) and top["output_dir"],
        "output_dir: must be a non-empty string",
    )
    _require(isinstance(top["loss_params"], dict), "loss_params: must be an object")
    _require(isinstance(top["scene"], dict), "scene: must be an object")
    _require(isinstance(top["trainer"], dict), "trainer: must be an object")
    return RunConfig(
        loss=top["loss"],
        loss_params=_validate_loss_params(top["loss"], top["loss_params"]),
        scene=_validate_scene(top["scene"]),
        trainer=_validate_trainer(top["trainer"]),
        seed=top["seed"],
        output_dir=top["output_dir"],
    )


def config_to_dict(cfg: RunConfig) -> dict:
    scene = asdict(cfg.scene)
    scene["shape_kinds"] = list(scene["shape_kinds"])
    return {
        "loss": cfg.loss,
        "loss_params": dict(cfg.loss_params),
        "scene": scene,
        "trainer": asdict(cfg.trainer),
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
    }


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(raw)


def default_config() -> RunConfig:
    """The fully-populated reference configuration."""
    return parse_config({})


def make_loss_fn(cfg: RunConfig):
    """Build the configured loss closure.

    Returns (loss_fn, center_cfg); center_cfg is the mutable center-loss
    state when that loss is selected, else None.
    """
    params = cfg.loss_params
    classes = cfg.scene.classes
    if cfg.loss == "adaptive":
        acfg = AdaptiveLossConfig(
            filter=FilterSpec(
                window=params["window"],
                classes=classes,
                stride=1,
                weight_schedule=WeightSchedule(params["weight_schedule"]),
            ),
            k=params["k"],
            normalize_inputs=params["normalize_inputs"],
        )
        return (lambda pred, labels: adaptive_loss(pred, labels, acfg)), None
    if cfg.loss == "softmax_ce":
        return plain_softmax_ce, None
    if cfg.loss == "focal":
        fcfg = FocalConfig(alpha=params["alpha"], gamma=params["gamma"])
        return (lambda pred, labels: focal_loss(pred, labels, fcfg)), None
    if cfg.loss == "center":
        ccfg = CenterLossConfig.zeros(
            classes, alpha=params["alpha"], lam=params["lambda"]
        )
        return (lambda pred, labels: center_loss(pred, labels, ccfg)), ccfg
    raise ConfigError(f"loss: unknown loss {cfg.loss!r}")
