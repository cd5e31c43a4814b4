"""Operator entry point: train, eval, bench, gradcheck, route.

Options may come from a key=value config file (--config) with command-line
flags taking precedence; unknown file keys are rejected and every run
prints its fully resolved configuration (and writes it next to its outputs
when --out is set).

Exit codes: 0 success, 1 gradcheck failure, 2 invalid configuration or
usage, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from .model import SHARINGS, VARIANTS, ConfigError, ModelConfig
from .router import RoutingError, route_permutation, simulate_routing
from .tasks import TASKS
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    train,
)
from .verify import TOLERANCE, run_gradcheck_suite


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--maps", type=int, default=48, help="feature maps per cell (even)")
    p.add_argument("--blocks", type=int, default=1, help="stacked rearrangeable blocks")
    p.add_argument("--variant", choices=VARIANTS, default="baseline")
    p.add_argument("--sharing", choices=SHARINGS, default="consecutive")
    p.add_argument("--no-residual", action="store_true", help="disable residual bridges")
    p.add_argument("--no-benes", action="store_true", help="single shuffle direction")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key=value defaults file")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", metavar="DIR", default=None, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="sxnet")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("train", help="train a task and write checkpoint + metrics")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--task", choices=sorted(TASKS), default=None,
                   help="required (flag or config file)")
    p.add_argument("--train-len", type=int, default=16, help="max padded training length")
    p.add_argument("--min-len", type=int, default=8, help="smallest padded instance")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=5.0, help="gradient norm cap, 0 disables")
    p.add_argument("--eval-lens", default="", help="comma separated, default 1x,2x,4x,8x")
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--eval-samples", type=int, default=64)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--fixed-size", action="store_true", help="train at max size only")
    p.add_argument("--mask-padding", action="store_true")
    p.add_argument("--resume", metavar="CKPT", default=None)
    p.set_defaults(fn=cmd_train, parser=p)
    commands["train"] = p

    p = sub.add_parser("eval", help="accuracy per length from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lengths", default="", help="comma separated, default 1x,2x,4x,8x")
    p.add_argument("--samples", type=int, default=128)
    p.set_defaults(fn=cmd_eval)
    commands["eval"] = p

    p = sub.add_parser("bench", help="forward-time scaling per length")
    _add_common(p)
    p.add_argument("--lengths", default=",".join(str(1 << k) for k in range(10, 17)))
    p.add_argument("--maps", type=int, default=96)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--arch", choices=["model", "attention"], default="model")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_bench)
    commands["bench"] = p

    p = sub.add_parser("gradcheck", help="verify every backward pass")
    _add_common(p)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    p.set_defaults(fn=cmd_gradcheck)
    commands["gradcheck"] = p

    p = sub.add_parser("route", help="program switch settings for a permutation")
    _add_common(p)
    p.add_argument("--perm", default=None, help="comma separated destination list")
    p.add_argument("--random", nargs=2, type=int, metavar=("K", "N"), default=None,
                   help="round-trip N random permutations on 2**K wires")
    p.set_defaults(fn=cmd_route)
    commands["route"] = p
    return parser, commands


# ---------------------------------------------------------------------------
# config files


def read_config_file(path: str) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = val
    return values


_BOOLS = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def apply_file_defaults(subparser: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in subparser._actions}
    unknown = set(values) - set(actions)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    for key, raw in values.items():
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in _BOOLS:
                raise ConfigError(f"config key {key}: expected boolean, got {raw!r}")
            coerced[key] = _BOOLS[raw.lower()]
        elif action.type is not None:
            try:
                coerced[key] = action.type(raw)
            except ValueError as e:
                raise ConfigError(f"config key {key}: {e}") from e
        else:
            coerced[key] = raw
        if action.choices and coerced[key] not in action.choices:
            raise ConfigError(f"config key {key}: {coerced[key]!r} not in {action.choices}")
    subparser.set_defaults(**coerced)


def log_resolved(args: argparse.Namespace) -> None:
    skip = {"fn", "command", "config", "parser"}
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    line = " ".join(f"{k}={v}" for k, v in resolved.items())
    print(f"config: command={args.command} {line}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "resolved.cfg"), "w") as fh:
            fh.write(f"command = {args.command}\n")
            for k, v in resolved.items():
                fh.write(f"{k} = {v}\n")


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip() != ""]


# ---------------------------------------------------------------------------
# subcommands


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        maps=args.maps,
        blocks=args.blocks,
        variant=args.variant,
        sharing=args.sharing,
        residual=not args.no_residual,
        benes=not args.no_benes,
    ).validate()


def cmd_train(args) -> int:
    if args.task is None:
        args.parser.error("the following arguments are required: --task")
    out_dir = args.out or os.path.join("runs", f"{args.task}-seed{args.seed}")
    args.out = out_dir
    log_resolved(args)
    config = TrainConfig(
        task=args.task,
        model=_model_config(args),
        train_len=args.train_len,
        min_len=args.min_len,
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        clip=args.clip,
        seed=args.seed,
        eval_lens=tuple(_csv_ints(args.eval_lens)),
        eval_every=args.eval_every,
        eval_samples=args.eval_samples,
        log_every=args.log_every,
        checkpoint_every=args.checkpoint_every,
        fixed_size=args.fixed_size,
        mask_padding=args.mask_padding,
        dtype=args.dtype,
    ).validate()
    state, metrics = train(config, resume=args.resume, out_dir=out_dir)
    final_eval = next((m["eval"] for m in reversed(metrics) if m["eval"]), {})
    print(f"done: step={state.step} checkpoint={os.path.join(out_dir, 'checkpoint.sxnc')} "
          f"eval={json.dumps(final_eval, sort_keys=True)}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    log_resolved(args)
    base = state.config.train_len
    lengths = _csv_ints(args.lengths) if args.lengths else [base, 2 * base, 4 * base, 8 * base]
    rows = []
    for L in lengths:
        res = evaluate(state, L, n_samples=args.samples, seed=args.seed)
        rows.append({"length": L, "accuracy": round(res["accuracy"], 6),
                     "whole_seq": round(res["whole_seq"], 6)})
    print(f"{'length':>8s} {'accuracy':>10s} {'whole_seq':>10s}")
    for row in rows:
        print(f"{row['length']:>8d} {row['accuracy']:>10.4f} {row['whole_seq']:>10.4f}")
    for row in rows:
        print("record " + json.dumps({"task": state.config.task, **row}, sort_keys=True))
    if args.out:
        with open(os.path.join(args.out, "eval.jsonl"), "w") as fh:
            for row in rows:
                fh.write(json.dumps({"task": state.config.task, **row}, sort_keys=True) + "\n")
    return 0


def cmd_bench(args) -> int:
    log_resolved(args)
    lengths = _csv_ints(args.lengths)
    rows = bench_mod.run_bench(lengths, maps=args.maps, blocks=args.blocks,
                               arch=args.arch, reps=args.reps, warmup=args.warmup,
                               threads=args.threads, seed=args.seed)
    print(f"{'n':>8s} {'mean_ms':>12s} {'median_ms':>12s} {'ms_per_n_log_n':>16s}")
    for row in rows:
        if row.get("oom"):
            print(f"{row['n']:>8d} {'oom':>12s}")
            continue
        print(f"{row['n']:>8d} {row['mean_ms']:>12.3f} {row['median_ms']:>12.3f} "
              f"{row['ms_per_n_log_n']:>16.8f}")
    slope = bench_mod.fit_slope(rows)
    if slope is not None:
        print(f"slope {slope:.4f}")
    if args.out:
        with open(os.path.join(args.out, "bench.jsonl"), "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if slope is not None:
                fh.write(json.dumps({"slope": round(slope, 4)}) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    log_resolved(args)
    tol = TOLERANCE[args.dtype]
    if args.dtype == "f32":
        print(f"warning: f32 mode relaxes the tolerance to {tol:g} "
              f"(single precision cannot resolve 1e-4 relative differences)")
    results = run_gradcheck_suite(args.dtype)
    failed = []
    for name, err in results:
        status = "ok" if err < tol else "FAIL"
        print(f"{status:4s} {name:30s} max_rel_err={err:.3e}")
        if err >= tol:
            failed.append(name)
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}")
        return 1
    print(f"gradcheck passed: {len(results)} components < {tol:g}")
    return 0


def cmd_route(args) -> int:
    log_resolved(args)
    if (args.perm is None) == (args.random is None):
        print("route: give exactly one of --perm or --random", file=sys.stderr)
        return 2
    if args.perm is not None:
        perm = _csv_ints(args.perm)
        n = len(perm)
        if n < 2 or n & (n - 1):
            print(f"route: need a power-of-two permutation, got {n} entries", file=sys.stderr)
            return 2
        k = n.bit_length() - 1
        settings = route_permutation(perm, k)
        for stage, bits in enumerate(settings):
            print("".join("1" if b else "0" for b in bits))
        realized = simulate_routing(settings, k)
        if realized != list(perm):
            print("verification FAILED", file=sys.stderr)
            return 1
        print(f"verified: {n} messages routed")
        return 0
    k, count = args.random
    rng = np.random.default_rng(args.seed)
    ok = 0
    for _ in range(count):
        perm = list(rng.permutation(1 << k))
        if simulate_routing(route_permutation(perm, k), k) == perm:
            ok += 1
    print(f"{ok}/{count} verified")
    return 0 if ok == count else 1


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()
    try:
        if argv and argv[0] in commands and "--config" in argv:
            idx = argv.index("--config")
            if idx + 1 >= len(argv):
                parser.error("--config needs a file argument")
            apply_file_defaults(commands[argv[0]], read_config_file(argv[idx + 1]))
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, RoutingError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
