"""Command line entry point: ``fdan {prepare,train,infer,eval,profile,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import ImageBuffer, load_image, load_manifest, prepare_dataset, save_image, to_luma
from .errors import ConfigError, FdanError
from .metrics import MetricReport
from .model import SCALES, FDAN, FdanConfig, build_fdan, fdan_forward
from .profiler import native_resolution, profile
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, train

log = logging.getLogger("fdan")

EXIT_USAGE = 2
EXIT_IO = 10


def predict(model: FDAN, img: ImageBuffer) -> ImageBuffer:
    """Run the network on one LR-SDR image; returns a 10-bit HDR buffer."""
    with no_grad():
        out = fdan_forward(Tensor(img.planes[None]), model).data[0]
    return ImageBuffer(np.clip(out, 0.0, 1.0).astype(np.float32), 10, "hdr_2100", img.layout)


def load_model(ckpt: str) -> FDAN:
    _, config = load_checkpoint(ckpt)
    model, _ = build_fdan(config)
    load_checkpoint(ckpt, model)
    return model


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """``section.key=value`` pairs; values are parsed as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(raw)
    return doc


CONFIG_SECTIONS = {"model", "train", "manifest"}


def load_run_config(path: str | None, overrides: list[str]) -> tuple[FdanConfig, TrainConfig, str | None]:
    doc = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = apply_overrides(doc, overrides)
    unknown = set(doc) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return FdanConfig.from_dict(doc.get("model", {})), TrainConfig.from_dict(doc.get("train", {})), doc.get("manifest")


# -- subcommands -----------------------------------------------------------------------


def cmd_prepare(args) -> int:
    manifest = prepare_dataset(args.input, args.out, args.scale)
    print(f"wrote {len(manifest.entries)} pairs to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.scale is not None:
        overrides.append(f"model.scale={args.scale}")
    if args.seed is not None:
        overrides += [f"model.seed={args.seed}", f"train.seed={args.seed}"]
    if args.out is not None:
        overrides.append(f"train.checkpoint_path={json.dumps(args.out)}")
    model_cfg, train_cfg, manifest_path = load_run_config(args.config, overrides)
    manifest_path = args.manifest or manifest_path
    if not manifest_path:
        raise ConfigError("no manifest given (--manifest or 'manifest' in the config)")
    if args.config and args.manifest is None:
        manifest_path = str(Path(args.config).parent / manifest_path)
    manifest = load_manifest(manifest_path, seed=train_cfg.seed)
    result = train(train_cfg, model_cfg, manifest, resume=args.ckpt)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {result.iterations} iterations, final loss {last:.6f}, checkpoint {result.checkpoint_path}")
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.ckpt)
    img = load_image(args.input)
    out = predict(model, img)
    save_image(out, args.out)
    print(f"{args.input} ({img.width}x{img.height}) -> {args.out} ({out.width}x{out.height})")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    manifest = load_manifest(args.manifest, split="test")
    report = MetricReport(peak=1023.0)
    for pair in manifest.load_pairs():
        pred = predict(model, pair.lr)
        pred_codes = ImageBuffer.from_codes(pred.codes(), 10, "hdr_2100", pred.layout)
        report.add(pair.source_id, to_luma(pred_codes) * 1023.0, to_luma(pair.hr) * 1023.0)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(report.summary())
    return 0


def cmd_profile(args) -> int:
    if args.config:
        model_cfg, _, _ = load_run_config(args.config, [])
        model_cfg = FdanConfig.from_dict({**model_cfg.to_dict(), "scale": args.scale or model_cfg.scale})
    else:
        model_cfg = FdanConfig(scale=args.scale or 4)
    model, _ = build_fdan(model_cfg)
    hw = (args.height, args.width) if args.height and args.width else native_resolution(model_cfg.scale)
    report = profile(model, hw)
    csv_text = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
    elif args.csv:
        sys.stdout.write(csv_text)
    print(report.summary())
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


# -- plumbing --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdan", description="Feature decomposition aggregation network for joint SR-ITM")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps results bitwise reproducible)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="synthesize LR-SDR inputs by bicubic downsampling and write a manifest")
    p.add_argument("--input", required=True, help="directory with sdr/ and hdr/ subdirectories")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, choices=SCALES, required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="L1 training with Adam and cosine annealing")
    p.add_argument("--config", help="JSON document with 'model', 'train' and optional 'manifest'")
    p.add_argument("--manifest")
    p.add_argument("--scale", type=int, choices=SCALES)
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt", help="resume from this checkpoint")
    p.add_argument("--out", help="checkpoint path to write")
    p.add_argument("overrides", nargs="*", help="section.key=value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="upscale one LR-SDR image to HR-HDR")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="CSV destination (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter / FLOP / MAC / activation counts")
    p.add_argument("--scale", type=int, choices=SCALES)
    p.add_argument("--config")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--csv", action="store_true", help="print the per-layer CSV")
    p.add_argument("--out", help="write the per-layer CSV here")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("selftest", help="gradient, shape and parameter-count oracles")
    p.set_defaults(func=cmd_selftest)
    return parser


def _configure_logging(verbose: int) -> None:
    level = os.environ.get("FDAN_LOG")
    if level is None:
        level = ("WARNING", "INFO", "DEBUG")[min(verbose, 2)]
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args.verbose)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except FdanError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: io: file not found: {exc.filename or exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: config: invalid JSON ({exc})", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
