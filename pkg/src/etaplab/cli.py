"""Command-line front end.

    etaplab verify    [--seed N] [--seq-len N ...] [--bc N ...] [--tolerance F] ...
    etaplab bench     [--mode M ...] [--seq-len N ...] [--repeats N] [--out PATH] ...
    etaplab model     [--heads N] [--seq-len N ...] ...
    etaplab simulate  --t-c N --stages S --t-load X --t-compute Y [--t-barrier Z] [--split]
    etaplab precision [--seq-len N] [--precision fp16emu] ...

Every flag may also come from a JSON file given with ``--config``; keys are
flag names without the leading dashes (``"seq-len": [512, 1024]``). Flags on
the command line win. Exit codes: 0 success, 1 verification failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence, TextIO

from . import bench
from .costmodel import DecodeShape, WgmmaSpec, predicted_speedup, utilization
from .pipesim import ScheduleConfig, simulate, trace_to_csv
from .tensor import Precision

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("etaplab")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _scale(text: str) -> float | None:
    if str(text).lower() == "auto":
        return None
    value = float(text)
    if not value > 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"scale must be positive or 'auto', got {text}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0 or math.isnan(value):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def _pos_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _time(text: str) -> float:
    value = float(text)
    return int(value) if value.is_integer() else value


# name -> (argparse kwargs, converter applied to config-file values)
_OPTIONS: dict[str, dict[str, Any]] = {
    "mode": dict(action="append", choices=bench.MODES, help="pipeline to run (repeatable)"),
    "seq-len": dict(action="append", type=_positive_int, help="KV context length (repeatable)"),
    "batch": dict(type=_positive_int),
    "heads": dict(type=_positive_int),
    "q-tokens": dict(type=_positive_int),
    "d-qk": dict(type=_positive_int),
    "d-v": dict(type=_positive_int),
    "br": dict(type=_positive_int, help="query block size"),
    "bc": dict(action="append", type=_positive_int, help="KV block size (repeatable)"),
    "stages": dict(type=_positive_int),
    "precision": dict(choices=[p.value for p in Precision]),
    "scale": dict(type=_scale, help="softmax logit multiplier or 'auto' (1/sqrt(d_qk))"),
    "seed": dict(type=int),
    "repeats": dict(type=_positive_int),
    "out": dict(help="write CSV/report here instead of stdout"),
    "allow-large": dict(action="store_true", help="lift the desk-scale size guard"),
    "tolerance": dict(type=_nonneg_float),
    "m-min": dict(type=_positive_int),
    "n-step": dict(type=_positive_int),
    "k-step": dict(type=_positive_int),
    "peak-tflops": dict(type=_pos_float),
    "t-c": dict(type=_positive_int, help="number of KV blocks"),
    "t-load": dict(type=_time),
    "t-compute": dict(type=_time),
    "t-barrier": dict(type=_time),
    "split": dict(action="store_true", help="split consumer work across both warpgroups"),
}

_COMMAND_OPTIONS = {
    "verify": ("seed", "seq-len", "bc", "br", "heads", "q-tokens", "d-qk", "d-v", "precision",
               "scale", "tolerance", "out"),
    "bench": ("mode", "seq-len", "batch", "heads", "q-tokens", "d-qk", "d-v", "br", "bc", "stages",
              "precision", "scale", "seed", "repeats", "out", "allow-large"),
    "model": ("seq-len", "batch", "heads", "q-tokens", "d-qk", "d-v", "bc", "m-min", "n-step",
              "k-step", "peak-tflops", "out"),
    "simulate": ("t-c", "seq-len", "bc", "stages", "t-load", "t-compute", "t-barrier", "split", "out"),
    "precision": ("seq-len", "heads", "q-tokens", "d-qk", "d-v", "br", "bc", "precision", "scale",
                  "seed", "out"),
}

_DEFAULTS: dict[str, dict[str, Any]] = {
    "verify": {"seed": None, "seq-len": [64, 257, 1024], "bc": [16, 64, 100], "br": 16, "heads": 16,
               "q-tokens": 1, "d-qk": 576, "d-v": 512, "precision": "exact64", "scale": None,
               "tolerance": 1e-10, "out": None},
    "bench": {"mode": list(bench.MODES), "seq-len": [512, 1024, 2048, 4096, 8192, 16384], "batch": 1,
              "heads": 16, "q-tokens": 1, "d-qk": 576, "d-v": 512, "br": 16, "bc": [64], "stages": 2,
              "precision": "exact64", "scale": None, "seed": 0, "repeats": 5, "out": None,
              "allow-large": False},
    "model": {"seq-len": [512, 1024, 2048, 4096, 8192, 16384, 32768, 65536], "batch": 1, "heads": 16,
              "q-tokens": 1, "d-qk": 576, "d-v": 512, "bc": [64], "m-min": 64, "n-step": 8,
              "k-step": 16, "peak-tflops": 148.0, "out": None},
    "simulate": {"t-c": None, "seq-len": None, "bc": [64], "stages": 2, "t-load": 1, "t-compute": 1,
                 "t-barrier": 0, "split": False, "out": None},
    "precision": {"seq-len": [4096], "heads": 16, "q-tokens": 1, "d-qk": 576, "d-v": 512, "br": 16,
                  "bc": [64], "precision": "fp16emu", "scale": None, "seed": 42, "out": None},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etaplab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "verify": "run the oracle/standard/transposed equivalence suite",
        "bench": "time the pipelines and report CSV rows",
        "model": "report WGMMA padding utilization and predicted speedup",
        "simulate": "simulate the producer/consumer block schedule",
        "precision": "low-precision RMSE of both pipelines against FP64",
    }
    for command, names in _COMMAND_OPTIONS.items():
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", help="JSON file with flag values (flags win)")
        for name in names:
            kwargs = dict(_OPTIONS[name])
            kwargs.setdefault("default", None)
            p.add_argument(f"--{name}", dest=name.replace("-", "_"), **kwargs)
        if command == "verify":
            # negative-control hook for testing the suite itself
            p.add_argument("--inject-fault", choices=["rescale-sign"], default=None, help=argparse.SUPPRESS)
    return parser


def _convert_config_value(name: str, value: Any) -> Any:
    spec = _OPTIONS[name]
    action = spec.get("action")
    if action == "store_true":
        if not isinstance(value, bool):
            raise UsageError(f"config key {name!r} must be true or false")
        return value
    conv: Callable[[str], Any] = spec.get("type", str)
    choices = spec.get("choices")

    def one(v: Any) -> Any:
        try:
            out = conv(str(v))
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {name!r}: {exc}") from None
        if choices is not None and out not in choices:
            raise UsageError(f"config key {name!r}: {out!r} not in {list(choices)}")
        return out

    if action == "append":
        values = value if isinstance(value, list) else [value]
        return [one(v) for v in values]
    if isinstance(value, list):
        raise UsageError(f"config key {name!r} takes a single value")
    if name == "scale" and value is None:
        return None
    return one(value)


def resolve_options(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge built-in defaults, the config file and command-line flags (in that order)."""
    merged = dict(_DEFAULTS[command])
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in raw.items():
            name = key.replace("_", "-")
            if name not in _COMMAND_OPTIONS[command]:
                raise UsageError(f"config key {key!r} is not a {command} option")
            merged[name] = _convert_config_value(name, value)
    for name in _COMMAND_OPTIONS[command]:
        value = getattr(args, name.replace("-", "_"))
        if value is not None:
            merged[name] = value
    return merged


@contextlib.contextmanager
def _output(path: str | None) -> Iterator[TextIO]:
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _write_csv(out: TextIO, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def cmd_verify(opts: dict[str, Any], fault: str | None = None) -> int:
    seeds = (1, 2, 3) if opts["seed"] is None else (opts["seed"],)
    cases = bench.default_verify_grid(
        seeds,
        opts["seq-len"],
        opts["bc"],
        n_q=opts["heads"] * opts["q-tokens"],
        d_qk=opts["d-qk"],
        d_v=opts["d-v"],
        b_r=opts["br"],
        scale=opts["scale"],
        precision=Precision.parse(opts["precision"]),
    )
    results = bench.run_verify(cases, opts["tolerance"], fault)
    with _output(opts["out"]) as out:
        _write_csv(out, bench.VERIFY_COLUMNS, [bench.check_row(r) for r in results])
    failures = [r for r in results if not r.passed]
    for r in failures:
        print(
            f"FAIL {r.check}: max_abs_err={r.max_abs_err:.6e} tolerance={r.tolerance:.6e} "
            f"{r.case.describe()}",
            file=sys.stderr,
        )
    print(
        f"verify: {len(results) - len(failures)}/{len(results)} checks passed over {len(cases)} cases",
        file=sys.stderr,
    )
    return EXIT_FAIL if failures else EXIT_OK


def cmd_bench(opts: dict[str, Any]) -> int:
    cfg = bench.BenchConfig(
        modes=tuple(opts["mode"]),
        seq_lens=tuple(opts["seq-len"]),
        b_cs=tuple(opts["bc"]),
        heads=opts["heads"],
        q_tokens=opts["q-tokens"],
        d_qk=opts["d-qk"],
        d_v=opts["d-v"],
        batch=opts["batch"],
        b_r=opts["br"],
        stages=opts["stages"],
        precision=Precision.parse(opts["precision"]),
        scale=opts["scale"],
        seed=opts["seed"],
        repeats=opts["repeats"],
        allow_large=opts["allow-large"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = bench.run_bench(cfg)
    with _output(opts["out"]) as out:
        _write_csv(out, bench.BENCH_COLUMNS, [r.csv_row() for r in rows])
    return EXIT_OK


MODEL_COLUMNS = (
    "mode", "heads", "q_tokens", "kv_len", "d_qk", "d_v", "batch", "block_kv", "useful_macs",
    "issued_macs", "utilization", "m_axis_utilization", "predicted_speedup", "attainable_tflops",
)


def model_rows(opts: dict[str, Any]) -> list[list[str]]:
    spec = WgmmaSpec(opts["m-min"], opts["n-step"], opts["k-step"], opts["peak-tflops"])
    rows = []
    for block_kv in opts["bc"]:
        for kv_len in opts["seq-len"]:
            shape = DecodeShape(kv_len, opts["heads"], opts["q-tokens"], opts["d-qk"], opts["d-v"],
                                opts["batch"])
            speedup = predicted_speedup(shape, spec, block_kv)
            for mode in ("original", "etap"):
                rep = utilization(mode, shape, spec, block_kv)
                rows.append([
                    mode, str(shape.heads), str(shape.q_tokens), str(kv_len), str(shape.d_qk),
                    str(shape.d_v), str(shape.batch), str(block_kv), str(rep.useful_macs),
                    str(rep.issued_macs), f"{rep.utilization:.6f}", f"{rep.m_utilization:.6f}",
                    f"{speedup:.6f}", f"{rep.attainable_tflops(spec):.3f}",
                ])
    return rows


def cmd_model(opts: dict[str, Any]) -> int:
    rows = model_rows(opts)
    with _output(opts["out"]) as out:
        _write_csv(out, MODEL_COLUMNS, rows)
    return EXIT_OK


def cmd_simulate(opts: dict[str, Any]) -> int:
    t_c = opts["t-c"]
    if t_c is None:
        if not opts["seq-len"]:
            raise UsageError("simulate needs --t-c or --seq-len")
        t_c = math.ceil(opts["seq-len"][0] / opts["bc"][0])
    try:
        cfg = ScheduleConfig(t_c, opts["stages"], opts["t-load"], opts["t-compute"], opts["t-barrier"],
                             opts["split"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    trace = simulate(cfg)
    with _output(opts["out"]) as out:
        trace_to_csv(trace, out)
    print(trace.summary(), file=sys.stdout if opts["out"] else sys.stderr)
    return EXIT_OK


def cmd_precision(opts: dict[str, Any]) -> int:
    rows = []
    for n_kv in opts["seq-len"]:
        for b_c in opts["bc"]:
            for row in bench.precision_study(
                n_kv,
                n_q=opts["heads"] * opts["q-tokens"],
                d_qk=opts["d-qk"],
                d_v=opts["d-v"],
                b_r=opts["br"],
                b_c=b_c,
                seed=opts["seed"],
                precision=Precision.parse(opts["precision"]),
                scale=opts["scale"],
            ):
                rows.append([str(n_kv), str(b_c), *row.csv_row()])
    with _output(opts["out"]) as out:
        _write_csv(out, ("n_kv", "b_c", *bench.PRECISION_COLUMNS), rows)
    print("note: hw_rmse_reference values are H20 hardware measurements, not targets", file=sys.stderr)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args.command, args)
        if args.command == "verify":
            return cmd_verify(opts, args.inject_fault)
        return {
            "bench": cmd_bench,
            "model": cmd_model,
            "simulate": cmd_simulate,
            "precision": cmd_precision,
        }[args.command](opts)
    except UsageError as exc:
        print(f"etaplab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
