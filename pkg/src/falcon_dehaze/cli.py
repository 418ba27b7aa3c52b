"""Command-line entry point: ``falcon-dehaze <subcommand> ...``.

Exit codes: 0 success, 2 bad arguments or configuration, 3 I/O or image
decode failure, 4 malformed weight file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, imaging
from .density import DEFAULT_PATCH, check_patch, ddp, with_cdm
from .network import ConfigError as ArchError
from .network import FalconConfig, WeightFormatError, falcon_forward, infer_config, init_weights, load_weights
from .tensor import Tensor, no_grad
from .trainer import ConfigError, TrainConfig, Trainer, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_WEIGHTS = 0, 2, 3, 4

log = logging.getLogger("falcon_dehaze")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_image(path) -> np.ndarray:
    try:
        return imaging.decode_image(path)
    except FileNotFoundError:
        raise CliError(f"input not found: {path}", EXIT_IO) from None
    except (OSError, imaging.DecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _write_image(img: np.ndarray, path) -> None:
    try:
        imaging.encode_image(img, path)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _load_weights(path):
    try:
        weights = load_weights(path)
    except FileNotFoundError:
        raise CliError(f"weights not found: {path}", EXIT_IO) from None
    except OSError as exc:
        raise CliError(f"cannot read weights {path}: {exc}", EXIT_IO) from None
    except WeightFormatError as exc:
        raise CliError(f"bad weight file {path}: {exc}", EXIT_WEIGHTS) from None
    try:
        config = infer_config(weights)
    except ArchError as exc:
        raise CliError(f"bad weight file {path}: {exc}", EXIT_WEIGHTS) from None
    return weights, config


def _patch(value: str) -> int:
    try:
        return check_patch(int(value))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def dehaze_image(hazy: np.ndarray, weights, config: FalconConfig, use_cdm: bool = True,
                 patch_size: int = DEFAULT_PATCH) -> np.ndarray:
    """Dehaze one HWC image; sizes not divisible by 2**depth are edge-padded then cropped."""
    h, w = hazy.shape[:2]
    m = 2**config.depth
    ph, pw = -h % m, -w % m
    x = np.pad(hazy, ((0, ph), (0, pw), (0, 0)), mode="edge").transpose(2, 0, 1)[None]
    with no_grad():
        out = falcon_forward(with_cdm(Tensor(np.ascontiguousarray(x)), patch_size, use_cdm), weights, "eval", config)
    return out.data[0].transpose(1, 2, 0)[:h, :w]


# -- subcommands -------------------------------------------------------------------


def cmd_dehaze(args) -> int:
    weights, config = _load_weights(args.weights)
    hazy = _read_image(args.input)
    _write_image(dehaze_image(hazy, weights, config, not args.no_cdm, args.patch), args.output)
    return EXIT_OK


def cmd_density(args) -> int:
    img = _read_image(args.input)
    with no_grad():
        mask = ddp(Tensor(img.transpose(2, 0, 1)[None].copy()), args.patch)
    _write_image(mask.data[0, 0], args.output)
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"steps": args.steps, "seed": args.seed}
    try:
        config = TrainConfig.from_file(args.config, **overrides) if args.config else TrainConfig(
            **{k: v for k, v in overrides.items() if v is not None})
    except FileNotFoundError:
        raise CliError(f"config not found: {args.config}", EXIT_IO) from None
    except (ConfigError, TypeError) as exc:
        raise CliError(f"bad config: {exc}", EXIT_USAGE) from None
    if not Path(args.data).is_dir():
        raise CliError(f"dataset directory not found: {args.data}", EXIT_IO)
    try:
        model_config = FalconConfig.preset(args.preset)
        trainer = Trainer(config, model_config)
        report = train(config, args.data, args.out, trainer=trainer)
    except (ConfigError, ArchError, ValueError) as exc:
        if isinstance(exc, imaging.DecodeError):
            raise CliError(str(exc), EXIT_IO) from None
        raise CliError(f"bad configuration: {exc}", EXIT_USAGE) from None
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    if args.curve:
        report.to_csv(args.curve)
    if report.history:
        first, last = report.history[0], report.history[-1]
        print(f"steps = {len(report.history)}")
        print(f"initial_img = {first['img']!r}")
        print(f"final_img = {last['img']!r}")
        print(f"final_total = {last['total']!r}")
    print(f"weights = {report.weights_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.weights:
        weights, config = _load_weights(args.weights)
    else:
        config = FalconConfig.preset(args.preset)
        weights = init_weights(config, args.seed)
    threads = args.threads if args.threads is not None else int(os.environ.get("FALCON_THREADS", "1") or 1)
    reports = []
    for res in args.resolutions:
        try:
            r = bench.measure_fps(weights, res, args.warmup, args.runs, args.seed, threads, config, not args.no_cdm)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_USAGE) from None
        reports.append(r)
        print(r.to_text(), end="")
        print()
    if args.csv:
        try:
            Path(args.csv).write_text(bench.reports_to_csv(reports))
        except OSError as exc:
            raise CliError(f"cannot write {args.csv}: {exc}", EXIT_IO) from None
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        imaging.write_corpus(args.out, args.seed, args.train, args.val, args.size, args.format)
    except OSError as exc:
        raise CliError(f"cannot write corpus to {args.out}: {exc}", EXIT_IO) from None
    print(f"wrote {args.train} train + {args.val} val pairs to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    weights, config = _load_weights(args.weights)
    for name, t in weights.items():
        print(f"{name}\t{'x'.join(str(d) for d in t.shape)}")
    total = sum(t.data.size for t in weights.values())
    print(f"# {len(weights)} tensors, {total} values; depth={config.depth} base={config.base} alpha_in={config.alpha_in}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def _resolutions(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution list {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="falcon-dehaze", description="Single-image dehazing toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dehaze", help="dehaze one image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--no-cdm", action="store_true", help="feed a zero density channel instead of the CDM")
    p.add_argument("--patch", type=_patch, default=DEFAULT_PATCH)
    p.set_defaults(func=cmd_dehaze)

    p = sub.add_parser("density", help="write the haze density mask as a grayscale image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--patch", type=_patch, default=DEFAULT_PATCH)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("train", help="train on a directory with hazy/ and clear/ subdirectories")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("toy", "full"), default="toy")
    p.add_argument("--curve", help="write the per-step loss curve as CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="measure inference throughput")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--weights")
    src.add_argument("--preset", choices=("toy", "full"), default="toy")
    p.add_argument("--resolutions", type=_resolutions, default=[256])
    p.add_argument("--warmup", type=int, default=bench.MIN_WARMUP)
    p.add_argument("--runs", type=int, default=bench.MIN_RUNS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, help="op-level thread cap inside the timed region (0 = library default)")
    p.add_argument("--no-cdm", action="store_true")
    p.add_argument("--csv", help="write CSV rows here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate the synthetic hazy/clear corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=16)
    p.add_argument("--val", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="list tensors in a weight file")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def _apply_thread_cap():
    raw = os.environ.get("FALCON_THREADS", "0") or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"FALCON_THREADS must be an integer, got {raw!r}", EXIT_USAGE) from None
    if n > 0:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cap = _apply_thread_cap()  # noqa: F841  (keep the limiter alive)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
