"""Command-line entry point: ``flora <command> [flags]``.

Exit codes: 0 success, 1 validation or I/O error (or a missed ``--tol``),
2 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as fio
from .adapters import (FrozenLayer, TuckerAdapter, adapter_delta, init_lora, init_tucker,
                       load_bundle, merge, save_bundle, tucker_ranks)
from .analysis import amplification_factor, budget_csv, budget_table, locality_dispersion
from .training import (DivergenceError, RecoveryTask, gradient_suite, make_optimizer,
                       matrix_view, recovery_problem, run_training, seed_streams,
                       final_relative_error)

DEFAULT_SCALE = {"conv": 4.0, "linear": 0.4}
DEFAULT_R3 = 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return vals


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _layer_flags(p, with_ranks=True):
    p.add_argument("--layer", choices=["linear", "conv"], default="linear")
    p.add_argument("--d1", type=int, default=8, help="linear output dim")
    p.add_argument("--d2", type=int, default=8, help="linear input dim")
    p.add_argument("--din", type=int, default=8, help="conv input channels")
    p.add_argument("--dout", type=int, default=8, help="conv output channels")
    p.add_argument("--k", type=int, default=3, help="conv kernel size")
    if with_ranks:
        p.add_argument("--r", type=int, default=2, help="rank r = r1 = r2 (LoRA rank for lora)")
        p.add_argument("--r3", type=int, default=DEFAULT_R3, help="conv kernel rank")


def _train_flags(p):
    p.add_argument("--method", choices=["flora", "lora"], default="flora")
    p.add_argument("--target-ranks", type=_int_list, default=None,
                   help="Tucker ranks of the synthesized target, e.g. 2,2 or 2,2,1,1")
    p.add_argument("--target", type=Path, default=None, help="FLT1 target change (instead of synthesizing)")
    p.add_argument("--frozen", type=Path, default=None, help="FLT1 frozen weight (default: seeded Gaussian)")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=None, help="default: 1e-2 for adam, 0.1 for sgd")
    p.add_argument("--scale", type=float, default=None,
                   help=f"adapter scale s (default: {DEFAULT_SCALE['conv']:g} conv, "
                        f"{DEFAULT_SCALE['linear']:g} linear)")
    p.add_argument("--seed", type=int, default=None, help="falls back to $FLORA_SEED")
    p.add_argument("--record-every", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = Parser(prog="flora", description=__doc__, formatter_class=fmt)
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of flag defaults (flags take precedence)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("paramcount", help="parameter budgets", formatter_class=fmt)
    _layer_flags(p)
    p.add_argument("--method", choices=["flora", "lora"], default="flora")
    p.add_argument("--compare", action="store_true", help="print FLoRA and LoRA rows")
    p.add_argument("--csv", type=Path, default=None, help="also write the table as CSV")

    p = sub.add_parser("recover", help="fit an adapter to a target change", formatter_class=fmt)
    _layer_flags(p)
    _train_flags(p)
    p.add_argument("--tol", type=float, default=None, help="exit 1 unless final relative error <= tol")
    p.add_argument("--out-csv", type=Path, default=None, help="records CSV (default: stdout)")
    p.add_argument("--out-jsonl", type=Path, default=None)
    p.add_argument("--out-adapter", type=Path, default=None, help="adapter bundle directory")
    p.add_argument("--summary", type=Path, default=None, help="write a JSON run summary here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--only", action="append", default=None,
                   help="restrict to a kind: flora-linear, flora-conv, lora-linear, lora-conv")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="amplification factor and locality reports",
                       formatter_class=fmt)
    asub = p.add_subparsers(dest="what", required=True, parser_class=Parser)
    a = asub.add_parser("amp", formatter_class=fmt)
    a.add_argument("--delta", type=Path, required=True)
    a.add_argument("--frozen", type=Path, required=True)
    a.add_argument("--rank", type=int, required=True)
    a.add_argument("--out", type=Path, default=None)
    a = asub.add_parser("locality", formatter_class=fmt)
    a.add_argument("--din", type=int, required=True)
    a.add_argument("--dout", type=int, required=True)
    a.add_argument("--k", type=int, required=True)
    a.add_argument("--summary-only", action="store_true")
    a.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("merge", help="write W0 + s * delta", formatter_class=fmt)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--adapter", type=Path, required=True, help="adapter bundle dir or FLT1 delta")
    p.add_argument("--scale", type=float, default=None, help="default: the bundle's scale (1 for raw deltas)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", help="rank or scale sweeps over recover", formatter_class=fmt)
    p.add_argument("what", choices=["rank", "scale"])
    p.add_argument("--values", type=_float_list, required=True)
    _layer_flags(p)
    _train_flags(p)
    p.add_argument("--lr-rescale", choices=["core", "none"], default="core",
                   help="scale sweeps: rescale the core's step so s * delta follows the s=1 run "
                        "(adam: lr/s and eps*s; sgd: lr/s^2)")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.add_argument("--out", type=Path, default=None, help="summary CSV (default: stdout)")
    return parser


# -- helpers ---------------------------------------------------------------

def _emit(text: str, path: Path | None):
    if path is None:
        sys.stdout.write(text)
    else:
        fio.write_text_atomic(path, text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _positive(args, *names):
    for name in names:
        val = getattr(args, name)
        if val is None or val < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be a positive integer, got {val}")


def _shape(args) -> tuple:
    if args.layer == "linear":
        _positive(args, "d1", "d2")
        return (args.d1, args.d2)
    _positive(args, "din", "dout", "k")
    return (args.din, args.dout, args.k, args.k)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FLORA_SEED")
    if env is None:
        raise UsageError("a seed is required: pass --seed or set FLORA_SEED")
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FLORA_SEED must be an integer, got {env!r}")


def _adapter_ranks(args, shape):
    _positive(args, "r")
    if args.method == "lora":
        return args.r
    if len(shape) == 4:
        _positive(args, "r3")
    return tucker_ranks(shape, args.r, args.r3 if len(shape) == 4 else None)


def _scale(args) -> float:
    s = DEFAULT_SCALE[args.layer] if args.scale is None else args.scale
    if not np.isfinite(s):
        raise UsageError("--scale must be finite")
    return s


def _validate_train(args):
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    _positive(args, "record_every")
    if args.lr is not None and not (args.lr > 0 and np.isfinite(args.lr)):
        raise UsageError("--lr must be a positive number")


def _problem(args, shape, seed):
    """``(task, adapter_seed)`` from either files or a seeded synthetic target."""
    if args.target is not None:
        target = fio.load_tensor(args.target)
        if target.shape != shape:
            raise UsageError(f"{args.target}: shape {target.shape} does not match layer {shape}")
        frozen_rng, adapter_rng = seed_streams(seed, 2)
        if args.frozen is not None:
            w0 = fio.load_tensor(args.frozen)
            if w0.shape != shape:
                raise UsageError(f"{args.frozen}: shape {w0.shape} does not match layer {shape}")
        else:
            w0 = frozen_rng.standard_normal(shape) / np.sqrt(np.prod(shape[1:]))
        return RecoveryTask(FrozenLayer.from_weight(w0), target), int(adapter_rng.integers(2**31))
    ranks = args.target_ranks
    if ranks is None:
        raise UsageError("pass --target-ranks or --target")
    if len(ranks) != len(shape) or any(not 1 <= j <= i for i, j in zip(shape, ranks)):
        raise UsageError(f"--target-ranks {ranks} invalid for layer shape {shape}")
    task, adapter_seed = recovery_problem(shape, ranks, seed)
    if args.frozen is not None:
        w0 = fio.load_tensor(args.frozen)
        if w0.shape != shape:
            raise UsageError(f"{args.frozen}: shape {w0.shape} does not match layer {shape}")
        task = RecoveryTask(FrozenLayer.from_weight(w0), task.target)
    return task, adapter_seed


def _init_adapter(method, shape, ranks, scale, seed):
    if method == "flora":
        return init_tucker(shape, ranks, scale, seed)
    return init_lora(shape, ranks, scale, seed)


def _run(task, adapter, args, core_rescale=1.0):
    opt = make_optimizer(args.optimizer, args.lr)
    if core_rescale != 1.0 and isinstance(adapter, TuckerAdapter):
        rest = [1.0] * len(adapter.factors)
        if args.optimizer == "adam":
            # Adam is invariant to gradient scale once eps scales along with it
            opt.lr_multipliers = [1.0 / core_rescale] + rest
            opt.eps_multipliers = [core_rescale] + rest
        else:
            opt.lr_multipliers = [1.0 / core_rescale**2] + rest
    return run_training(task, adapter, opt, args.steps, args.record_every)


# -- commands --------------------------------------------------------------

def cmd_paramcount(args):
    shape = _shape(args)
    _positive(args, "r")
    if len(shape) == 4:
        _positive(args, "r3")
    rows = budget_table([{"shape": shape, "r": args.r, "r3": args.r3}])
    if not args.compare:
        rows = [row for row in rows if row.method == args.method]
    for row in rows:
        print(f"{row.method:6s} {row.layer:6s} shape={'x'.join(map(str, row.shape))} "
              f"ranks={','.join(map(str, row.ranks))} params={row.count}"
              + (f" ratio_vs_lora={row.ratio_vs_lora:.6g}" if args.compare else ""))
    if args.csv is not None:
        fio.write_text_atomic(args.csv, budget_csv(rows))
    return 0


def cmd_recover(args):
    shape = _shape(args)
    seed = _seed(args)
    _validate_train(args)
    ranks = _adapter_ranks(args, shape)
    scale = _scale(args)
    task, adapter_seed = _problem(args, shape, seed)
    adapter = _init_adapter(args.method, shape, ranks, scale, adapter_seed)
    try:
        records, trained = _run(task, adapter, args)
    except DivergenceError as exc:
        last = exc.records[-1]
        print(f"flora: diverged: {exc} (step {last.step}, loss {last.loss!r})", file=sys.stderr)
        return 2
    err = final_relative_error(task, trained)
    summary = {
        "method": args.method, "shape": list(shape),
        "ranks": list(ranks) if args.method == "flora" else [ranks],
        "scale": scale, "seed": seed, "steps": args.steps,
        "param_count": trained.num_params,
        "final_relative_error": err,
        "final_delta_frob": records[-1].delta_frob,
        "final_amp_factor": records[-1].amp_factor,
    }
    _emit(fio.records_to_csv(records), args.out_csv)
    if args.out_jsonl is not None:
        fio.write_text_atomic(args.out_jsonl, fio.records_to_jsonl(records))
    if args.out_adapter is not None:
        save_bundle(args.out_adapter, trained)
    if args.summary is not None:
        fio.write_text_atomic(args.summary, _dumps(summary))
    print(f"flora: final relative error {err!r} after {args.steps} steps", file=sys.stderr)
    if args.tol is not None and not err <= args.tol:
        print(f"flora: relative error {err!r} exceeds --tol {args.tol!r}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args):
    if not 1e-7 <= args.h <= 1e-3:
        raise UsageError(f"--h {args.h:g} outside [1e-7, 1e-3]; central differences at this "
                         "step are not a valid gradient reference")
    ok = True
    for name, rep in gradient_suite(h=args.h, tolerance=args.tol, only=args.only, seed=args.seed):
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{status} {name} max_rel_err={rep.worst_error:.3e} "
              f"(param {rep.worst_param}, index {rep.worst_index})")
    return 0 if ok else 1


def _as_matrix_input(t, path):
    if t.ndim not in (2, 4):
        raise UsageError(f"{path}: expected a 2-D or 4-D tensor, got shape {t.shape}")
    return matrix_view(t)


def cmd_analyze(args):
    if args.what == "amp":
        delta = fio.load_tensor(args.delta)
        frozen = fio.load_tensor(args.frozen)
        if delta.shape != frozen.shape:
            raise UsageError(f"{args.delta} shape {delta.shape} does not match "
                             f"{args.frozen} shape {frozen.shape}")
        dm = _as_matrix_input(delta, args.delta)
        if not 1 <= args.rank <= min(dm.shape):
            raise UsageError(f"--rank {args.rank} out of range for {dm.shape}")
        rep = amplification_factor(dm, _as_matrix_input(frozen, args.frozen), args.rank)
        _emit(_dumps(rep.to_dict()), args.out)
        return 0
    for name in ("din", "dout", "k"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")
    rep = locality_dispersion(args.din, args.dout, args.k)
    _emit(_dumps(rep.to_dict(include_pairs=not args.summary_only)), args.out)
    return 0


def cmd_merge(args):
    base = fio.load_tensor(args.base)
    layer = FrozenLayer.from_weight(base) if base.ndim in (2, 4) else None
    if layer is None:
        raise UsageError(f"{args.base}: expected a 2-D or 4-D weight, got shape {base.shape}")
    if args.adapter.is_dir():
        adapter = load_bundle(args.adapter)
        delta = adapter_delta(adapter, layer)
        scale = adapter.scale if args.scale is None else args.scale
    else:
        delta = fio.load_tensor(args.adapter)
        scale = 1.0 if args.scale is None else args.scale
        if delta.shape != base.shape:
            raise UsageError(f"{args.adapter}: shape {delta.shape} does not match "
                             f"{args.base} shape {base.shape}")
    if not np.isfinite(scale):
        raise UsageError("--scale must be finite")
    fio.save_tensor(args.out, merge(layer, delta, scale))
    return 0


SWEEP_FIELDS = ("setting", "status", "final_error", "param_count", "final_delta_frob",
                "final_amp_factor")


def _sweep_one(args, value):
    shape = _shape(args)
    seed = _seed(args)
    task, adapter_seed = _problem(args, shape, seed)
    core_rescale = 1.0
    if args.what == "rank":
        if value != int(value):
            raise UsageError(f"rank {value} is not an integer")
        args = argparse.Namespace(**{**vars(args), "r": int(value)})
        scale = _scale(args)
    else:
        scale = value
        if args.lr_rescale == "core":
            core_rescale = value
    row = {"setting": value}
    try:
        ranks = _adapter_ranks(args, shape)
        adapter = _init_adapter(args.method, shape, ranks, scale, adapter_seed)
        records, trained = _run(task, adapter, args, core_rescale)
    except DivergenceError:
        return {**row, "status": "diverged"}
    except (UsageError, ValueError) as exc:
        return {**row, "status": f"error: {exc}"}
    return {**row, "status": "ok", "final_error": final_relative_error(task, trained),
            "param_count": trained.num_params, "final_delta_frob": records[-1].delta_frob,
            "final_amp_factor": records[-1].amp_factor}


def cmd_sweep(args):
    if not args.values:
        raise UsageError("--values must list at least one setting")
    shape = _shape(args)
    _seed(args)
    _validate_train(args)
    if args.what == "scale" and any(not (np.isfinite(v) and v != 0) for v in args.values):
        raise UsageError("scale values must be finite and nonzero")
    if args.what == "rank" and any(v != int(v) or v < 1 for v in args.values):
        raise UsageError("rank values must be positive integers")
    _problem(args, shape, _seed(args))  # validate target inputs before fanning out
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_one, [args] * len(args.values), args.values))
    else:
        rows = [_sweep_one(args, v) for v in args.values]
    import csv
    import io as _io
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for row in rows:
        w.writerow(["" if row.get(f) is None else
                    (repr(row[f]) if isinstance(row[f], float) else row[f]) for f in SWEEP_FIELDS])
    _emit(buf.getvalue(), args.out)
    return 0


COMMANDS = {
    "paramcount": cmd_paramcount,
    "recover": cmd_recover,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
    "merge": cmd_merge,
    "sweep": cmd_sweep,
}


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    try:
        config = json.loads(known.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{known.config}: cannot read config ({exc})")
    if not isinstance(config, dict):
        raise UsageError(f"{known.config}: config must be a JSON object")
    config = {k.replace("-", "_"): v for k, v in config.items()}
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            dests = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in config.items() if k in dests})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return exc.code if isinstance(exc.code, int) else 1
        return COMMANDS[args.command](args)
    except (UsageError, fio.FormatError, ValueError, OSError) as exc:
        print(f"flora: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
