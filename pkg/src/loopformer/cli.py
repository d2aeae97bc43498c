"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
Verbosity comes from ``LOOPFORMER_LOG`` (``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .numerics import NonFiniteError
from .train import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    evaluate,
    format_summary,
    load_checkpoint,
    load_config,
    run_ablation,
    train,
)

log = logging.getLogger("loopformer")


class UsageError(Exception):
    pass


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _overrides(pairs: list[str] | None) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = _parse_value(value)
    return out


def _config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    ov = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    return config.with_overrides(ov) if ov else config


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    from .data import export_jsonl, make_split

    config = _config(args)
    train_idx, eval_idx = make_split(config.task.seed, config.n_train, config.n_eval)
    idx = (train_idx if args.split == "train" else eval_idx)[: args.n]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_jsonl(out, config.task, idx)
    _write_json(out.with_suffix(".meta.json"), {"fingerprint": config.fingerprint(), "config": config.to_dict(), "split": args.split, "count": n})
    print(f"wrote {n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"fingerprint": config.fingerprint(), "config": config.to_dict()})
    result = train(config, out)
    final = [m for m in result.metrics if m["step"] == config.steps]
    print(_eval_table(final))
    return 0


def _eval_table(rows: list[dict]) -> str:
    lines = ["r  accuracy  ce_raw   ce_adjusted  degraded"]
    for m in rows:
        lines.append(
            f"{m['r']:<2} {m['accuracy']:.4f}    {m['ce_raw']:.4f}   {m['ce_adjusted']:.4f}       {m['degraded_fraction']:.4f}"
        )
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .data import make_split

    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    trained = config.recursion.steps
    depth = args.eval_step or trained
    if depth > trained and not args.allow_extrapolate:
        raise UsageError(f"--eval-step {depth} exceeds the trained depth {trained}; pass --allow-extrapolate")
    if args.task and args.task != config.task.task:
        config = config.with_overrides({"task.task": args.task})
        ckpt.config = config
    model = ckpt.to_model()
    _, eval_idx = make_split(config.task.seed, config.n_train, config.n_eval)
    idx = eval_idx if args.n is None else eval_idx[: args.n]
    rows = evaluate(model, config, idx, steps=depth)
    report = {"fingerprint": config.fingerprint(), "checkpoint": str(args.ckpt), "n": len(idx), "steps": rows}
    if args.out:
        _write_json(Path(args.out), report)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        print(_eval_table(rows))
    return 0


def cmd_diagnose(args) -> int:
    from .diagnostics import run_diagnostics

    reports = run_diagnostics(args.ckpt, steps=args.steps, n_samples=args.n, seed=args.seed, out_dir=args.out)
    for rep in reports:
        norms = " ".join(f"{v:.3f}" for v in rep.per_layer_norm)
        ckas = " ".join(f"{v:.3f}" for v in rep.per_layer_cka)
        print(f"step {rep.step}\n  norm: {norms}\n  cka:  {ckas}")
    return 0


def cmd_ablate(args) -> int:
    config = _config(args)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {args.grid}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file {args.grid} is not valid JSON: {exc}") from None
    if not isinstance(grid, (dict, list)):
        raise ConfigError("grid must be an object of key -> list of values, or a list of override objects")
    rows = run_ablation(config, grid, args.out, parallel=args.parallel)
    print(format_summary(rows))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_suite

    errors = gradcheck_suite(seed=args.seed, eps=args.eps)
    for name, err in errors.items():
        print(f"{name:<28} max_rel_error={err:.3e}")
    worst = max(errors.values())
    print(f"{'max':<28} max_rel_error={worst:.3e}")
    return 0 if worst < args.tol else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="JSON training config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")

    p = sub.add_parser("gen-data", help="export task samples as JSON lines")
    config_flags(p)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data, seed=None)

    p = sub.add_parser("train", help="train one model")
    config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at each recursion depth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task")
    p.add_argument("--eval-step", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--allow-extrapolate", action="store_true")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="per-layer norm and CKA report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="train a grid of configurations")
    config_flags(p)
    p.add_argument("--grid", required=True, help="JSON: {dotted.key: [values]} or [overrides]")
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_ablate, seed=None)

    p = sub.add_parser("gradcheck", help="float64 finite-difference suite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("LOOPFORMER_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
