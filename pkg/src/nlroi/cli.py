"""Command-line surface: forward, gradcheck, train-toy, bench, selftest.

Exit codes are stable for scripting: 0 success, 1 validation failure
(bad flags, unreadable or malformed inputs, a failed check), 2 internal
error. Diagnostics go to stderr as a single line.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .autodiff import grad_check
from .bench import DEFAULT_DIMS, run_bench
from .blobio import _atomic_write, load_blob, load_params, save_blob
from .block import nlroi_forward
from .selftest import run_selftest
from .toytask import TrainConfig, train

_INT_KEYS = ("scenes_per_epoch", "epochs", "rois", "classes", "channels",
             "embed_channels", "nl_channels", "height", "width", "seed")
_FLOAT_KEYS = ("noise", "learning_rate", "momentum", "weight_decay")


def parse_config(path) -> TrainConfig:
    """Read ``key = value`` lines into a TrainConfig.

    ``#`` starts a comment, blank lines are skipped, unknown and duplicate
    keys are rejected, missing keys take the defaults. Range checks live
    in TrainConfig itself and name the offending key.
    """
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(
                    f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}"
                )
            key, _, text = line.partition("=")
            key, text = key.strip(), text.strip()
            if key in _INT_KEYS:
                caster, kind = int, "an integer"
            elif key in _FLOAT_KEYS:
                caster, kind = float, "a number"
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ValueError(f"{path}:{lineno}: duplicate config key {key!r}")
            try:
                values[key] = caster(text)
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: {key} must be {kind}, got {text!r}"
                ) from None
    return TrainConfig(**values)


class _UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse's default error() exits the process with code 2; route it
    # through the validation-failure path instead
    def error(self, message):
        raise _UsageError(message)


def _int_list(count=None, what="N values"):
    def parse(text: str):
        try:
            values = tuple(int(part.strip()) for part in text.split(","))
        except ValueError:
            raise ValueError(f"expected comma-separated integers, got {text!r}")
        if count is not None and len(values) != count:
            raise ValueError(f"expected {count} {what}, got {len(values)}")
        return values

    return parse


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nlroi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run the block on a feature blob")
    p.add_argument("--input", required=True, help="input BlobFile, shape (N, D, H, W)")
    p.add_argument("--params", required=True, help="ParamsFile with the block weights")
    p.add_argument("--out", required=True, help="where to write the augmented blob")
    p.add_argument("--emit-attention", help="also write the (N, N) attention blob")
    p.set_defaults(handler=_cmd_forward)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_int_list(6, "dims (N,D,Df,Dg,H,W)"),
                   default=(3, 4, 2, 2, 2, 2), metavar="N,D,Df,Dg,H,W")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on the synthetic scene task")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--baseline", action="store_true",
                   help="train the blockless baseline instead")
    p.add_argument("--metrics-out", default="metrics.tsv",
                   help="metrics record file (default: %(default)s)")
    p.set_defaults(handler=_cmd_train_toy)

    p = sub.add_parser("bench", help="forward-pass scaling benchmark")
    p.add_argument("--n-list", required=True, type=_int_list(),
                   metavar="N1,N2,...", help="RoI counts to time, ascending")
    p.add_argument("--dims", type=_int_list(5, "dims (D,Df,Dg,H,W)"),
                   default=DEFAULT_DIMS, metavar="D,Df,Dg,H,W")
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.add_argument("--full", action="store_true", help="widen the sweeps")
    p.set_defaults(handler=_cmd_selftest)

    return parser


def _cmd_forward(args) -> int:
    x = load_blob(args.input)
    params = load_params(args.params)
    out = nlroi_forward(x, params)
    save_blob(np.asarray(out.augmented), args.out)
    if args.emit_attention:
        save_blob(np.asarray(out.attention), args.emit_attention)
    print(f"augmented {out.augmented.shape} -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = grad_check(seed=args.seed, dims=args.dims, eps=args.eps, tol=args.tol)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def _cmd_train_toy(args) -> int:
    config = parse_config(args.config)
    result = train(config, with_block=not args.baseline, log=print)
    records = "".join(
        f"{epoch}\t{loss:.6f}\t{accuracy:.6f}\n"
        for epoch, loss, accuracy in result.metrics
    )
    _atomic_write(args.metrics_out, records.encode("ascii"))
    if result.diverged:
        print("error: training diverged; run reported as failed", file=sys.stderr)
        return 1
    print(f"final accuracy {result.final_accuracy:.4f}")
    return 0


def _cmd_bench(args) -> int:
    report = run_bench(args.n_list, dims=args.dims, reps=args.reps)
    for line in report.lines():
        print(line)
    return 0


def _cmd_selftest(args) -> int:
    return 0 if run_selftest(full=args.full) else 1


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
