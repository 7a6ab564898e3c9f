"""Command-line entry point: ``stconv <command> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage / config / input error.
Every command prints its resolved settings as ``# key=value  [source]`` lines
before doing any work; reports follow as plain CSV.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _pair(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return h, w


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stconv", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS threads (default: $STCONV_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="per-layer parameter and MAC report")
    p.add_argument("--config", required=True)
    p.add_argument("--input-hw", type=_pair, default=(48, 48))

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=500, help="training sequences")
    p.add_argument("--val-count", type=int, default=None, help="default: count / 5")
    p.add_argument("--test-count", type=int, default=None, help="default: count / 5")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--grid", type=_pair, default=(48, 48))

    p = sub.add_parser("train", help="fit a model on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")

    p = sub.add_parser("predict", help="write y_final logits as STSR")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="STSR inputs or a dataset directory")
    p.add_argument("--split", default="test", help="split to read when --input is a dataset directory")
    p.add_argument("--output", required=True)

    p = sub.add_parser("eval", help="score predictions against truth")
    p.add_argument("--pred", required=True, help="STSR logits or binary mask")
    p.add_argument("--truth", required=True, help="STSR targets or a dataset directory")
    p.add_argument("--split", default="test", help="split to read when --truth is a dataset directory")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pred-kind", choices=("auto", "logits", "mask"), default="auto",
                   help="auto treats an all-0/1 tensor as a mask")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-backward", type=float, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("selftest", help="every release check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-backward", type=float, default=None, help=argparse.SUPPRESS)
    return parser


def _print_settings(items):
    for key, value, source in items:
        print(f"# {key}={value}  [{source}]")


def _resolve_threads(flag):
    if flag is not None:
        return flag, "flag"
    env = os.environ.get("STCONV_THREADS")
    if env:
        try:
            return int(env), "env"
        except ValueError:
            raise UsageError(f"STCONV_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1, "default"


def _config_sources(path, overrides):
    from .config import parse_config_text

    raw = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    return raw, lambda key: "flag" if overrides.get(key) is not None else ("file" if key in raw else "default")


def _print_configs(model_cfg, train_cfg, source):
    _print_settings([(k, v, source(k)) for k, v in dataclasses.asdict(model_cfg).items()])
    if train_cfg is not None:
        _print_settings([(k, v, source(k)) for k, v in dataclasses.asdict(train_cfg).items()])


def cmd_analyze(args):
    from .config import resolve
    from .model import count_model_flops, dense_counterpart

    raw, source = _config_sources(args.config, {})
    model_cfg, _ = resolve(raw)
    _print_configs(model_cfg, None, source)
    _print_settings([("input_hw", f"{args.input_hw[0]},{args.input_hw[1]}", "flag")])
    shape = (1, model_cfg.in_channels, model_cfg.t_in) + args.input_hw
    report = count_model_flops(model_cfg, shape)
    print("layer,kernel,c_in,c_out,groups,params,macs")
    for l in report.layers:
        k = "x".join(map(str, l.spec.kernel))
        print(f"{l.name},{k},{l.spec.c_in},{l.spec.c_out},{l.spec.groups},{l.params},{l.macs}")
    dense_cfg = model_cfg if model_cfg.arch != "sianet" else dense_counterpart(model_cfg)
    dense = count_model_flops(dense_cfg, shape)
    print("model,params,macs")
    print(f"built,{report.total_params},{report.total_macs}")
    print(f"dense_counterpart,{dense.total_params},{dense.total_macs}")
    print("decomposition,decomposed_macs,dense_macs,tap_ratio,ratio")
    for d in report.decompositions:
        print(f"{d.name},{d.decomposed_macs},{d.dense_macs},{d.tap_ratio},{d.ratio:.6f}")
    if report.decompositions:
        total_dec = sum(d.decomposed_macs for d in report.decompositions)
        total_dense = sum(d.dense_macs for d in report.decompositions)
        print(f"all,{total_dec},{total_dense},,{total_dec / total_dense:.6f}")
    return EXIT_OK


def cmd_gen_data(args):
    from .data import SceneSpec, generate_splits, write_dataset

    h, w = args.grid
    val = args.count // 5 if args.val_count is None else args.val_count
    test = args.count // 5 if args.test_count is None else args.test_count
    if args.count < 1 or val < 0 or test < 0:
        raise UsageError("sample counts must be positive")
    try:
        spec = SceneSpec(height=h, width=w)
    except ValueError as exc:
        raise UsageError(f"--grid: {exc}") from None
    _print_settings([("out", args.out, "flag"), ("count", args.count, "flag"), ("val_count", val, "flag"),
                     ("test_count", test, "flag"), ("seed", args.seed, "flag"), ("grid", f"{h},{w}", "flag")])
    data = generate_splits(spec, args.seed, {"train": args.count, "val": val, "test": test})
    write_dataset(args.out, data)
    print(f"wrote,{len(data)},{args.out}")
    return EXIT_OK


def cmd_train(args):
    from .config import resolve
    from .data import read_dataset
    from .training import train_loop

    overrides = dict(args.set)
    overrides.update({"epochs": args.epochs, "seed": args.seed})
    raw, source = _config_sources(args.config, overrides)
    model_cfg, train_cfg = resolve(raw, overrides)
    _print_configs(model_cfg, train_cfg, source)
    _print_settings([("data", args.data, "flag"), ("out", args.out, "flag")])
    train = read_dataset(args.data, "train")
    val = read_dataset(args.data, "val")
    result = train_loop(model_cfg, (train.x, train.y), (val.x, val.y), train_cfg, args.out)
    print(result.log_csv(), end="")
    print(f"best_epoch,{result.best_epoch}")
    return EXIT_OK


def _read_inputs(path, split):
    from .data import read_dataset
    from .formats import read_tensor

    p = Path(path)
    if p.is_dir():
        return read_dataset(p, split)
    return read_tensor(p), None


def cmd_predict(args):
    from .formats import write_tensor
    from .model import load_checkpoint, predict_logits

    params, model_cfg = load_checkpoint(args.ckpt)
    _print_configs(model_cfg, None, lambda k: "checkpoint")
    _print_settings([("ckpt", args.ckpt, "flag"), ("input", args.input, "flag"), ("output", args.output, "flag")])
    src = _read_inputs(args.input, args.split)
    x = src[0] if isinstance(src, tuple) else src.x
    logits = predict_logits(x, params, model_cfg)
    write_tensor(args.output, logits.astype(model_cfg.np_dtype))
    print(f"wrote,{'x'.join(map(str, logits.shape))},{args.output}")
    return EXIT_OK


def cmd_eval(args):
    from .formats import read_tensor
    from .metrics import CSV_FIELDS, binarize, score_masks
    from .tensor import ShapeError

    if not 0.5 <= args.threshold <= 0.6:
        raise UsageError(f"--threshold must lie in [0.5, 0.6], got {args.threshold}")
    _print_settings([("pred", args.pred, "flag"), ("truth", args.truth, "flag"), ("threshold", args.threshold, "flag"),
                     ("pred_kind", args.pred_kind, "flag")])
    pred = read_tensor(args.pred)
    src = _read_inputs(args.truth, args.split)
    truth = src[0] if isinstance(src, tuple) else src.y
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if not np.all((truth == 0) | (truth == 1)):
        raise UsageError("truth must be binary")
    kind = args.pred_kind
    if kind == "auto":
        kind = "mask" if np.all((pred == 0) | (pred == 1)) else "logits"
    mask = pred.astype(bool) if kind == "mask" else binarize(pred, args.threshold)
    row = score_masks(mask, truth).as_row()
    print("# fields=" + ",".join(CSV_FIELDS))
    print(",".join(str(row[k]) if isinstance(row[k], int) else f"{row[k]:.6f}" for k in CSV_FIELDS))
    return EXIT_OK


def _run_checks(args, full: bool):
    from . import autograd as ad
    from .selftest import all_passed, format_report, gradient_checks, run_selftest

    _print_settings([("seed", args.seed, "flag")])
    old = ad._CONV_WEIGHT_GRAD_SCALE
    if args.corrupt_backward is not None:
        ad._CONV_WEIGHT_GRAD_SCALE = args.corrupt_backward
    try:
        results = run_selftest(args.seed) if full else gradient_checks(args.seed)
    finally:
        ad._CONV_WEIGHT_GRAD_SCALE = old
    print(format_report(results), end="")
    ok = all_passed(results)
    print(f"summary,{'PASS' if ok else 'FAIL'},{sum(r.passed for r in results)}/{len(results)}")
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "analyze": cmd_analyze,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcheck": lambda a: _run_checks(a, False),
    "selftest": lambda a: _run_checks(a, True),
}


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .config import ConfigError
    from .formats import CorruptFileError
    from .tensor import ShapeError

    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        threads, source = _resolve_threads(args.threads)
        if threads < 1:
            raise UsageError("thread count must be positive")
        print(f"# command={args.command}")
        _print_settings([("threads", threads, source)])
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}" + (f" (key: {exc.key})" if exc.key else ""), file=sys.stderr)
    except (UsageError, ShapeError, CorruptFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
