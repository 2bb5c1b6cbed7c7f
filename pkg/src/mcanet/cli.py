"""Command-line entry point: train / eval / predict / gradcheck / stats / synth.

Exit codes: 0 success, 1 user error (bad config, missing files, corrupt
inputs), 2 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, config_to_dict, load_config
from .data import load_dataset, read_mcaf, read_pgm, save_dataset, synth_generate, write_pgm
from .decoder import MCANet
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GenerationError,
    ShapeError,
)
from .metrics import model_stats
from .tensor import Tensor, no_grad, precision
from .train import evaluate, generate_from_config, predict_labels, train
from .verify import run_battery

USER_ERRORS = (ConfigError, DataError, CheckpointError, GenerationError,
               FileNotFoundError, IsADirectoryError, PermissionError,
               json.JSONDecodeError)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcanet",
                                description="Cross-axis attention segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config")
    t.add_argument("--config", required=True, help="preset name or JSON path")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--data", help="dataset directory (default: synthesize per config)")
    t.add_argument("--log", help="JSON-lines training log path")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="metrics JSON output path")
    e.add_argument("--config", help="override the checkpoint sidecar config")

    pr = sub.add_parser("predict", help="segment one image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True, help=".mcaf or .pgm input image")
    pr.add_argument("--mask-out", required=True, help="PGM label map output")
    pr.add_argument("--config", help="override the checkpoint sidecar config")

    g = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    g.add_argument("--module", default="all", choices=["all", "decoder", "ops"])

    s = sub.add_parser("stats", help="parameter and flop accounting")
    s.add_argument("--config", required=True)
    s.add_argument("--input-size", default="512x512", help="HxW, default 512x512")

    sy = sub.add_parser("synth", help="generate a synthetic dataset")
    sy.add_argument("--seed", type=int, required=True)
    sy.add_argument("--count", type=int, required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--task", default="binary_lesion",
                    choices=["binary_lesion", "multi_organ"])
    sy.add_argument("--size", default="64x64", help="HxW, default 64x64")
    sy.add_argument("--labels", type=int, default=3,
                    help="foreground labels for multi_organ")
    return p


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"size must look like 512x512, got {text!r}") from exc


def _sidecar(ckpt: str) -> Path:
    return Path(str(ckpt) + ".json")


def _load_model(ckpt_path: str, config_override: str | None) -> tuple[MCANet, RunConfig]:
    if config_override:
        cfg = load_config(config_override)
    else:
        sidecar = _sidecar(ckpt_path)
        if not sidecar.exists():
            raise ConfigError(f"no config given and sidecar {sidecar} not found")
        cfg = config_from_dict(json.loads(sidecar.read_text()))
    table = load_checkpoint(ckpt_path)
    from .config import build_model

    model = build_model(cfg.variant, seed=cfg.train.seed)
    try:
        model.load_state_dict(table)
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint incompatible with config: {exc}") from exc
    return model, cfg


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.data:
        data = load_dataset(args.data)
    else:
        data = generate_from_config(cfg)
    result = train(cfg, data, log_path=args.log)
    save_checkpoint(result.state, args.out)
    _sidecar(args.out).write_text(json.dumps(config_to_dict(cfg), indent=2))
    last = next((r for r in reversed(result.log) if "loss" in r), None)
    status = "aborted" if result.aborted else "done"
    print(f"train {status}: {len(result.log)} records, "
          f"final loss {last['loss']:.6f}" if last else f"train {status}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, cfg = _load_model(args.ckpt, args.config)
    data = load_dataset(args.data)
    with precision(cfg.train.precision):
        report = evaluate(model, data)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2))
    print(f"miou={report.miou:.4f} mdice={report.mdice:.4f} "
          f"dsc={report.dsc_mean:.4f} hd={report.hd:.2f} hd95={report.hd95:.2f}")
    print(f"report written to {args.report}")
    return 0


def _cmd_predict(args) -> int:
    model, cfg = _load_model(args.ckpt, args.config)
    path = Path(args.image)
    if path.suffix == ".pgm":
        img = read_pgm(path).astype(np.float64) / 255.0
        img = img[None]
    else:
        img = read_mcaf(path)
        if img.ndim == 2:
            img = img[None]
    if img.shape[0] != model.in_channels:
        raise DataError(f"model expects {model.in_channels} channels, "
                        f"image has {img.shape[0]}")
    if img.shape[1] % 32 or img.shape[2] % 32:
        raise DataError(f"image extents must be divisible by 32, got {img.shape[1:]}")
    with precision(cfg.train.precision), no_grad():
        dtype = model.encoder.stem1.weight.data.dtype
        batch = Tensor(np.ascontiguousarray(img[None].astype(dtype)))
        labels = predict_labels(model, batch)[0]
    write_pgm(args.mask_out, labels)
    print(f"mask written to {args.mask_out} ({labels.shape[0]}x{labels.shape[1]})")
    return 0


def _cmd_gradcheck(args) -> int:
    worst, results = run_battery(args.module)
    for name in sorted(results):
        print(f"{name:24s} {results[name]:.3e}")
    print(f"max relative error: {worst:.3e}")
    if worst < 1e-4:
        print("gradcheck OK")
        return 0
    print("gradcheck FAILED (threshold 1e-4)", file=sys.stderr)
    return 2


def _cmd_stats(args) -> int:
    cfg = load_config(args.config)
    h, w = _parse_size(args.input_size)
    from .config import build_model

    with precision("float32"):
        model = build_model(cfg.variant, seed=0)
        params, flops = model_stats(model, h, w)
    dec_params = sum(p.size for name, p in model.named_parameters()
                     if name.startswith("decoder."))
    print(f"config: {cfg.variant.name}, input {h}x{w}")
    print(f"params: {params} ({params / 1e6:.2f} M)")
    print(f"decoder params: {dec_params} ({dec_params / 1e6:.2f} M)")
    print(f"flops: {flops} ({flops / 1e9:.2f} G)")
    return 0


def _cmd_synth(args) -> int:
    h, w = _parse_size(args.size)
    samples = synth_generate(args.seed, args.count, h, w,
                             task=args.task, num_labels=args.labels)
    save_dataset(samples, args.out)
    print(f"{len(samples)} samples written to {args.out}")
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "stats": _cmd_stats,
    "synth": _cmd_synth,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - invariant breach
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
