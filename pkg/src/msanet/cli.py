"""Command-line entry point: train, denoise, eval, gradcheck, synth.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 I/O error.

The run configuration is a JSON document with three optional sections::

    {
      "model": {"base_channels": 32, "subnet_depths": [6, 5, 4, 2], ...},
      "train": {"epochs": 30, "batch": 8, "patch": 64, "lr0": 1e-4, ...},
      "data":  {"train_dir": "...", "val_dir": null, "sigma": 30.0,
                "seed": 0, "grayscale": false}
    }

Unknown keys are errors. Command-line flags override config values, and
the fully resolved document is logged (and saved next to training output)
so it can be passed back with ``--config`` to reproduce a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .blocks import ConfigError
from .data import (
    ImageFormatError,
    SyntheticDataset,
    add_awgn,
    file_seed,
    list_images,
    load_image,
    save_image,
)
from .gradcheck import run_suite
from .metrics import denoise_array, evaluate, passthrough
from .model import ModelConfig, build
from .tensor import ShapeError, set_deterministic
from .train import (
    CheckpointFormatError,
    ConfigMismatchError,
    Trainer,
    TrainSchedule,
    load_checkpoint,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DATA_DEFAULTS = {"train_dir": None, "val_dir": None, "sigma": 30.0, "seed": 0, "grayscale": False}

log = logging.getLogger("msanet")


class UsageError(Exception):
    pass


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s", "%Y-%m-%dT%H:%M:%S%z"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def resolve_config(path=None, **overrides) -> dict:
    """Merge a config document with flag overrides and expand all defaults."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(doc) - {"model", "train", "data"})
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    data = dict(DATA_DEFAULTS)
    extra = sorted(set(doc.get("data", {})) - set(DATA_DEFAULTS))
    if extra:
        raise ConfigError(f"unknown data config keys: {', '.join(extra)}")
    data.update(doc.get("data", {}))
    train = dict(doc.get("train", {}))
    model = dict(doc.get("model", {}))
    for key, value in overrides.items():
        if value is None:
            continue
        section, name = key.split(".")
        {"data": data, "train": train, "model": model}[section][name] = value
    try:
        sched = TrainSchedule.from_dict(train)
        mcfg = ModelConfig.from_dict(model)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return {"model": mcfg.to_dict(), "train": sched.to_dict(), "data": data}


def _dataset(directory, sigma, seed, grayscale=False) -> SyntheticDataset:
    paths = list_images(directory)
    if not paths:
        raise UsageError(f"no images in {directory}")
    images = [load_image(p, grayscale) for p in paths]
    if len({im.shape[1] for im in images}) > 1:
        raise UsageError(f"{directory} mixes grayscale and color images; use the grayscale option")
    return SyntheticDataset(images, sigma, seed, [str(p) for p in paths])


def cmd_train(args) -> int:
    if args.resume is None and args.data is None and args.config is None:
        raise UsageError("--data is required")
    cfg = resolve_config(
        args.config,
        **{"data.train_dir": args.data, "data.sigma": args.sigma, "data.seed": args.seed,
           "train.epochs": args.epochs, "train.seed": args.seed},
    )
    data = cfg["data"]
    if data["train_dir"] is None:
        raise UsageError("--data is required")
    log.info("resolved config %s", json.dumps(cfg, sort_keys=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    gray = data["grayscale"] or cfg["model"]["in_channels"] == 1
    dataset = _dataset(data["train_dir"], data["sigma"], data["seed"], gray)
    if dataset.channels != cfg["model"]["in_channels"]:
        raise ConfigError(f"in_channels is {cfg['model']['in_channels']} but images have {dataset.channels}")
    val = _dataset(data["val_dir"], data["sigma"], data["seed"], gray) if data["val_dir"] else None

    if args.resume:
        sched = TrainSchedule.from_dict(cfg["train"]) if args.epochs is not None else None
        trainer = Trainer.resume(args.resume, dataset, out, val, schedule=sched)
        if trainer.done:
            print(f"schedule complete at step {trainer.step}; nothing to do")
            return EXIT_OK
        log.info("resuming at step %d of %d", trainer.step, trainer.schedule.total_steps)
    else:
        model = build(ModelConfig.from_dict(cfg["model"]), seed=cfg["train"]["seed"])
        trainer = Trainer(model, dataset, TrainSchedule.from_dict(cfg["train"]), out, val)
        trainer.save(out / "initial.msan")
        log.info("model has %d parameters", model.count_params())
    if trainer.schedule.total_steps > 0:
        trainer.run()
        trainer.save(out / "final.msan")
        (out / "report.csv").write_text(trainer.report.to_csv())
    log.info("finished at step %d", trainer.step)
    return EXIT_OK


def _load_model(ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    return ckpt.build_model()


def cmd_denoise(args) -> int:
    model = _load_model(args.ckpt)
    src = Path(args.input)
    if src.is_dir():
        inputs = list_images(src)
        if not inputs:
            raise UsageError(f"no images in {src}")
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [out_dir / p.name for p in inputs]
    else:
        inputs, targets = [src], [Path(args.output)]
        targets[0].parent.mkdir(parents=True, exist_ok=True)
    for p, t in zip(inputs, targets):
        img = load_image(p)
        if img.shape[1] != model.config.in_channels:
            raise ShapeError(
                f"{p}: checkpoint expects {model.config.in_channels}-channel input, image has {img.shape[1]}"
            )
        save_image(np.clip(denoise_array(model, img), 0.0, 1.0), t)
        log.info("%s -> %s", p, t)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.passthrough:
        model = passthrough
    elif args.ckpt is None or args.ckpt == "none":
        raise UsageError("--ckpt is required unless --passthrough is given")
    else:
        model = _load_model(args.ckpt)
    dataset = _dataset(args.clean_dir, args.sigma, args.seed, args.grayscale)
    if model is not passthrough and dataset.channels != model.config.in_channels:
        raise ShapeError(
            f"checkpoint expects {model.config.in_channels}-channel input, images have {dataset.channels}"
            + ("; pass --grayscale to evaluate on luma" if model.config.in_channels == 1 else "")
        )
    # the identity surrogate measures the raw noise floor, so it is not clamped
    report = evaluate(model, dataset, clamp=not args.passthrough)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report.to_csv())
    print(f"mean PSNR {report.mean_psnr:.4f} dB  mean SSIM {report.mean_ssim:.4f}  ({len(report.paths)} images)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.scope, seed=args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.target:<24} max rel err {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  n={r.checked}  {status}")
    bad = [r.target for r in results if not r.passed]
    if bad:
        print(f"tolerance exceeded: {', '.join(bad)}")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(args) -> int:
    paths = list_images(args.clean_dir)
    if not paths:
        raise UsageError(f"no images in {args.clean_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        clean = load_image(p)
        noisy = add_awgn(clean, args.sigma, file_seed(args.seed, p.name))
        save_image(np.clip(noisy, 0.0, 1.0), out / p.name)
    log.info("wrote %d noisy images to %s", len(paths), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msanet", description="Multi-scale adaptive denoising network.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on synthetic AWGN pairs")
    p.add_argument("--config")
    p.add_argument("--data", help="directory of clean training images")
    p.add_argument("--sigma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise an image or a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM on clean images with synthetic noise")
    p.add_argument("--ckpt")
    p.add_argument("--passthrough", action="store_true", help="evaluate the identity (noise floor)")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grayscale", action="store_true", help="convert color images to luma")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=["op", "block", "model"], default="op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write noisy counterparts of clean images")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    set_deterministic(True)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigMismatchError, ShapeError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (OSError, ImageFormatError, CheckpointFormatError) as e:
        log.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
