"""``attanet`` command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 bad usage or unreadable input.
Output is deterministic for fixed flags; ``--timestamps`` prefixes log lines
with wall-clock time and is off by default.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .complexity import compare_table, format_table, reports_to_csv
from .data_io import (
    ConfigError,
    FormatError,
    colorize,
    gen_toy_dataset,
    load_checkpoint,
    parse_config,
    read_ppm,
    save_checkpoint,
    write_pgm,
    write_ppm,
)
from .gradcheck import run_gradcheck
from .model import (
    TOY_MODEL,
    TOY_TRAIN,
    ModelConfig,
    TrainingDiverged,
    TrainSettings,
    evaluate_miou,
    init_model,
    predict,
    train_toy,
)
from .nn import HORIZONTAL, VERTICAL
from .sam import init_sam, naive_nonlocal_forward, naive_strip_forward, sam_forward
from .tensor import ContractError, ShapeError, Tensor

ORACLE_TOL = 1e-10

USAGE_ERRORS = (ConfigError, FormatError, ShapeError, ContractError, OSError)


class _Out:
    def __init__(self, timestamps: bool) -> None:
        self.timestamps = timestamps

    def __call__(self, line: str = "") -> None:
        prefix = time.strftime("%Y-%m-%dT%H:%M:%S ") if self.timestamps else ""
        print(prefix + line, flush=True)


def _load_settings(path: str | None) -> tuple[ModelConfig, TrainSettings]:
    if path is None:
        return dataclasses.replace(TOY_MODEL), dataclasses.replace(TOY_TRAIN)
    return parse_config(path)


def cmd_gradcheck(args, out: _Out) -> int:
    results = run_gradcheck(seed=args.seed, trials=args.trials)
    width = max(len(r.op) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        out(f"{r.op:<{width}}  max_rel_err={r.max_rel_error:.3e}  tol={r.tolerance:.0e}  {status}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        out(f"gradcheck FAILED: {', '.join(failed)}")
        return 1
    out(f"gradcheck passed: {len(results)} ops")
    return 0


def oracle_cases(seed: int, cases: int) -> tuple[float, float]:
    """Worst deviation of ``sam_forward`` from the two brute-force oracles.

    Returns ``(vs non-local at h=1, vs strip loop on general shapes)``.
    """
    rng = np.random.default_rng(seed)
    worst_nl = worst_strip = 0.0
    for _ in range(cases):
        c = int(rng.integers(2, 9))
        w = int(rng.integers(1, 9))
        p = init_sam(rng, c, reduction=2, direction=VERTICAL)
        f = Tensor(rng.standard_normal((1, c, 1, w)))
        worst_nl = max(worst_nl, float(np.abs(sam_forward(f, p)[0].data - naive_nonlocal_forward(f, p).data).max()))

        shape = (1, int(rng.integers(2, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        direction = VERTICAL if rng.random() < 0.5 else HORIZONTAL
        p = init_sam(rng, shape[1], reduction=2, direction=direction)
        f = Tensor(rng.standard_normal(shape))
        worst_strip = max(worst_strip, float(np.abs(sam_forward(f, p)[0].data - naive_strip_forward(f, p).data).max()))
    return worst_nl, worst_strip


def cmd_oracle_check(args, out: _Out) -> int:
    nl, strip = oracle_cases(args.seed, args.cases)
    ok = True
    for label, err in (("sam vs non-local (h=1)", nl), ("sam vs strip loop", strip)):
        passed = err <= ORACLE_TOL
        ok &= passed
        out(f"{label:<24} cases={args.cases}  max_abs_diff={err:.3e}  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_flops(args, out: _Out) -> int:
    try:
        comparison = compare_table(args.channels, args.cprime, args.height, args.width)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    out(f"C={args.channels} C'={args.cprime} H={args.height} W={args.width}")
    out(format_table(comparison))
    text = reports_to_csv(comparison.reports)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        out()
        sys.stdout.write(text)
    return 0


def cmd_train_toy(args, out: _Out) -> int:
    config, settings = _load_settings(args.config)
    config = dataclasses.replace(config, seed=args.seed)
    dataset = gen_toy_dataset(args.n_train, args.dataset_seed)
    iters = settings.iters if args.iters is None else args.iters
    params, history = train_toy(
        config,
        dataset,
        iters,
        seed=args.seed,
        settings=settings,
        on_log=lambda i, loss, acc: out(f"iter {i}  loss {loss:.4f}  pixel_acc {acc:.4f}"),
    )
    save_checkpoint(args.out, params)
    if args.metrics:
        Path(args.metrics).write_text(history.csv())
    out(f"saved checkpoint to {args.out}")
    return 0


def _load_model(ckpt: str, config_path: str | None):
    config, _ = _load_settings(config_path)
    return load_checkpoint(ckpt, init_model(config))


def cmd_infer(args, out: _Out) -> int:
    params = _load_model(args.ckpt, args.config)
    image = read_ppm(args.image)
    labels = predict(image, params)[0].astype(np.uint8)
    write_pgm(args.out, labels)
    if args.color:
        write_ppm(args.color, colorize(labels))
    counts = np.bincount(labels.ravel(), minlength=params.config.num_classes)
    out(f"wrote {args.out}  class pixel counts {counts.tolist()}")
    return 0


def cmd_eval(args, out: _Out) -> int:
    params = _load_model(args.ckpt, args.config)
    result = evaluate_miou(params, gen_toy_dataset(args.n, args.dataset_seed))
    for k, iou in enumerate(result.per_class):
        out(f"class {k}  IoU {iou:.4f}")
    out(f"mIoU {result.miou:.4f}  pixel_acc {result.pixel_acc:.4f}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace, _Out], int]] = {
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
    "flops": cmd_flops,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attanet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--timestamps", action="store_true", help="prefix log lines with wall-clock time")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)

    p = sub.add_parser("oracle-check", help="compare strip attention with brute-force loops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=50)

    p = sub.add_parser("flops", help="analytic FLOP comparison of attention blocks")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=512)
    p.add_argument("--cprime", type=int, default=64)
    p.add_argument("--csv", metavar="PATH", help="write the CSV here instead of stdout")

    config_help = "key = value config file (default: the built-in toy preset)"
    p = sub.add_parser("train-toy", help="train on the synthetic band dataset")
    p.add_argument("--iters", type=int, default=None, help="default: from the config (2000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--metrics", metavar="CSV")
    p.add_argument("--config", help=config_help)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--dataset-seed", type=int, default=1)

    p = sub.add_parser("infer", help="segment a PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, metavar="PPM")
    p.add_argument("--out", required=True, metavar="PGM")
    p.add_argument("--color", metavar="PPM")
    p.add_argument("--config", help=config_help)

    p = sub.add_parser("eval", help="mIoU on a generated toy split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset-seed", type=int, default=2)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--config", help=config_help)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = _Out(args.timestamps)
    try:
        return COMMANDS[args.command](args, out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
