"""Command-line entry point for reproducible, config-driven runs.

Subcommands: train, eval, gradcheck, gen-data, k-sweep.  Exit codes are 0
on success, 1 on runtime failure, 2 on usage or validation errors.
SEGLOSS_THREADS caps numeric worker threads; it must be applied before the
numeric libraries load, which is why the heavy imports live inside the
command handlers.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _apply_thread_cap() -> None:
    cap = os.environ.get("SEGLOSS_THREADS")
    if not cap:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, cap)


def _fail_usage(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _fail_runtime(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_RUNTIME


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_run_dir(path: str, force: bool) -> str | None:
    if os.path.exists(path) and os.listdir(path):
        if not force:
            return f"output dir {path} is not empty (use --force to overwrite)"
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return None


def cmd_train(args) -> int:
    from .config import ConfigError, load_config
    from .trainer import TrainingDivergedError

    if args.write_default_config:
        from .config import default_config, dump_config

        with open(args.write_default_config, "w", encoding="utf-8") as fh:
            fh.write(dump_config(default_config()))
        print(f"wrote reference config to {args.write_default_config}")
        return EXIT_OK

    if not args.config:
        return _fail_usage("train: --config is required (or --write-default-config)")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail_usage(str(exc))
    except OSError as exc:
        return _fail_usage(f"cannot read config: {exc}")

    run_dir = args.output_dir or cfg.output_dir
    problem = _prepare_run_dir(run_dir, args.force)
    if problem:
        return _fail_usage(problem)

    try:
        train_run(cfg, run_dir)
    except TrainingDivergedError as exc:
        diagnostic = {
            "iteration": exc.iteration,
            "loss": exc.loss,
            "grad_norm": exc.grad_norm,
        }
        _write_json(os.path.join(run_dir, "diagnostic.json"), diagnostic)
        return _fail_runtime(f"training diverged: {exc}")
    print(f"run complete: {run_dir}")
    return EXIT_OK


def train_run(cfg, run_dir: str):
    """Train per config into run_dir, writing all run artifacts."""
    from .config import dump_config
    from .grid import LabelGrid
    from .net import net_forward
    from .synthdata import save_label_png
    from .trainer import make_eval_set, run_experiment_trained, save_checkpoint

    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    trained = run_experiment_trained(
        cfg, metrics_path=os.path.join(run_dir, "metrics.ndjson")
    )
    report = trained.report
    _write_json(os.path.join(run_dir, "summary.json"), report.summary_dict())
    save_checkpoint(
        os.path.join(run_dir, "checkpoint"), trained.net, report.iterations
    )

    mask_dir = os.path.join(run_dir, "masks")
    os.makedirs(mask_dir, exist_ok=True)
    for idx, sample in enumerate(make_eval_set(cfg)):
        pred = net_forward(trained.net, sample.image)
        hard = LabelGrid(pred.data.argmax(axis=2).astype("uint8"))
        save_label_png(hard, os.path.join(mask_dir, f"eval{idx:02d}_pred.png"))
        save_label_png(sample.labels, os.path.join(mask_dir, f"eval{idx:02d}_gt.png"))
    return trained


def cmd_eval(args) -> int:
    from .config import ConfigError, load_config
    from .trainer import (
        CheckpointError,
        evaluate_net,
        load_checkpoint,
        make_eval_set,
    )

    if args.run_dir:
        manifest = os.path.join(args.run_dir, "checkpoint", "manifest.json")
        config_path = os.path.join(args.run_dir, "config.json")
    else:
        if not (args.checkpoint and args.config):
            return _fail_usage("eval: pass --run-dir, or both --checkpoint and --config")
        manifest, config_path = args.checkpoint, args.config

    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as exc:
        return _fail_usage(f"eval: {exc}")
    try:
        net, _ = load_checkpoint(manifest)
    except CheckpointError as exc:
        return _fail_runtime(str(exc))

    report = evaluate_net(net, make_eval_set(cfg))
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _parse_size(text: str):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"size must look like 5x5x3, got {text!r}")
    h, w, c = (int(p) for p in parts)
    if min(h, w, c) < 1:
        raise ValueError("size components must be positive")
    return h, w, c


def cmd_gradcheck(args) -> int:
    from .config import LOSS_NAMES

    if args.loss not in LOSS_NAMES:
        return _fail_usage(
            f"gradcheck: unknown loss {args.loss!r}, pick one of {list(LOSS_NAMES)}"
        )
    try:
        size = _parse_size(args.size)
    except ValueError as exc:
        return _fail_usage(f"gradcheck: {exc}")
    if args.window < 1 or args.window % 2 == 0:
        return _fail_usage("gradcheck: --window must be an odd positive integer")
    if args.k < 1:
        return _fail_usage("gradcheck: --k must be >= 1")

    report = run_loss_gradcheck(
        args.loss, size, seed=args.seed, window=args.window, k=args.k
    )
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def run_loss_gradcheck(loss: str, size, seed: int, window: int = 3, k: float = 3.0):
    """Finite-difference check of one loss on a seeded random instance."""
    import numpy as np

    from .filters import FilterSpec
    from .gradcheck import check_gradient, finite_difference_grad
    from .grid import Grid3, LabelGrid
    from .losses import (
        AdaptiveLossConfig,
        CenterLossConfig,
        FocalConfig,
        adaptive_loss,
        center_loss,
        focal_loss,
        plain_softmax_ce,
    )

    h, w, c = size
    rng = np.random.default_rng(seed)
    pred = Grid3(rng.normal(0.0, 1.0, (h, w, c)))
    labels = LabelGrid(rng.integers(0, c, (h, w)).astype("uint8"))

    if loss == "adaptive":
        cfg = AdaptiveLossConfig(filter=FilterSpec(window=window, classes=c), k=k)
        fn = lambda p, l: adaptive_loss(p, l, cfg)
    elif loss == "softmax_ce":
        fn = plain_softmax_ce
    elif loss == "focal":
        fcfg = FocalConfig()
        fn = lambda p, l: focal_loss(p, l, fcfg)
    else:
        ccfg = CenterLossConfig.zeros(c)
        ccfg.centers = rng.normal(0.0, 1.0, (c, c))
        fn = lambda p, l: center_loss(p, l, ccfg)

    analytic = fn(pred, labels).grad
    numeric = finite_difference_grad(lambda g: fn(g, labels).loss, pred)
    return check_gradient(analytic, numeric)


def cmd_gen_data(args) -> int:
    from .grid import save_grid, save_labels
    from .synthdata import SceneSpec, generate_sample, save_label_png

    try:
        spec = SceneSpec(
            height=args.height,
            width=args.width,
            classes=args.classes,
            num_shapes=args.num_shapes,
            class_frequency_skew=args.skew,
            noise_std=args.noise_std,
            seed=args.seed,
        )
    except ValueError as exc:
        return _fail_usage(f"gen-data: {exc}")

    os.makedirs(args.out, exist_ok=True)
    from dataclasses import replace

    for idx in range(args.count):
        sample = generate_sample(replace(spec, seed=spec.seed + idx))
        stem = os.path.join(args.out, f"sample{idx:04d}")
        save_grid(sample.image, stem + "_image.slg")
        save_labels(sample.labels, stem + "_labels.sll")
        if args.png:
            save_label_png(sample.labels, stem + "_labels.png")
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_k_sweep(args) -> int:
    from .config import ConfigError, load_config
    from .trainer import TrainingDivergedError

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail_usage(f"k-sweep: {exc}")
    if cfg.loss != "adaptive":
        return _fail_usage("k-sweep: config must select the adaptive loss")
    try:
        ks = [float(part) for part in args.ks.split(",") if part]
    except ValueError:
        return _fail_usage(f"k-sweep: cannot parse --ks {args.ks!r}")
    if not ks or any(k < 1 for k in ks):
        return _fail_usage("k-sweep: every k must be >= 1")

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for k in ks:
        sub_cfg = _with_k(cfg, k)
        run_dir = os.path.join(args.out, f"k_{k:g}")
        problem = _prepare_run_dir(run_dir, args.force)
        if problem:
            return _fail_usage(problem)
        try:
            trained = train_run(sub_cfg, run_dir)
        except TrainingDivergedError as exc:
            return _fail_runtime(f"k={k:g} diverged: {exc}")
        summary = trained.report.summary_dict()
        rows.append((k, summary["final_mean_iou"], summary["final_loss"]))
        print(f"k={k:g}: mean_iou={summary['final_mean_iou']}")

    table = os.path.join(args.out, "sweep.csv")
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "final_mean_iou", "final_loss"])
        writer.writerows(rows)
    print(f"sweep table: {table}")
    return EXIT_OK


def _with_k(cfg, k: float):
    from dataclasses import replace

    params = dict(cfg.loss_params)
    params["k"] = k
    return replace(cfg, loss_params=params)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segloss",
        description="Locally adaptive segmentation loss experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment from a config")
    p_train.add_argument("--config", help="path to a run config JSON file")
    p_train.add_argument("--output-dir", help="override the config's output_dir")
    p_train.add_argument(
        "--force", action="store_true", help="overwrite a non-empty output dir"
    )
    p_train.add_argument(
        "--write-default-config",
        metavar="PATH",
        help="write the reference config with all defaults and exit",
    )
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the seeded eval set")
    p_eval.add_argument("--run-dir", help="a train output dir (checkpoint + config)")
    p_eval.add_argument("--checkpoint", help="path to a checkpoint manifest.json")
    p_eval.add_argument("--config", help="run config JSON (with --checkpoint)")
    p_eval.set_defaults(handler=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of one loss")
    p_grad.add_argument("loss", help="adaptive | softmax_ce | focal | center")
    p_grad.add_argument("--size", default="5x5x3", help="instance size HxWxC")
    p_grad.add_argument("--seed", type=int, default=7)
    p_grad.add_argument("--window", type=int, default=3, help="adaptive filter window")
    p_grad.add_argument("--k", type=float, default=3.0, help="adaptive Minkowski k")
    p_grad.set_defaults(handler=cmd_gradcheck)

    p_gen = sub.add_parser("gen-data", help="emit synthetic sample files")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--count", type=int, default=1)
    p_gen.add_argument("--height", type=int, default=64)
    p_gen.add_argument("--width", type=int, default=64)
    p_gen.add_argument("--classes", type=int, default=6)
    p_gen.add_argument("--num-shapes", type=int, default=5)
    p_gen.add_argument("--skew", type=float, default=1.0)
    p_gen.add_argument("--noise-std", type=float, default=0.25)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--png", action="store_true", help="also write paletted PNGs")
    p_gen.set_defaults(handler=cmd_gen_data)

    p_sweep = sub.add_parser("k-sweep", help="train one run per k, emit a CSV table")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--ks", default="1,2,3,5", help="comma-separated k values")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--force", action="store_true")
    p_sweep.set_defaults(handler=cmd_k_sweep)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
