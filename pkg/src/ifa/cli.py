"""``ifa`` command line.

Exit codes: 0 success, 1 a property check failed, 2 usage or config error,
3 file or data error. ``IFA_LOG_LEVEL`` sets log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import bench, checks, config, experiments
from .data import generate, read_dataset, write_dataset
from .errors import ConfigError, DataError, UsageError
from .evaluate import evaluate
from .model import IFAModel, ModelConfig
from .training import load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _sections(args):
    raw = config.read_config(args.config) if args.config else {}
    seed = getattr(args, "seed", None)
    gen = config.build("data", raw.get("data"), seed=seed, num_requests=getattr(args, "num_requests", None))
    model = config.model_config_for(gen, raw.get("model"), seed=seed)
    tr = config.build("train", raw.get("train"), seed=seed, lr=getattr(args, "lr", None),
                      epochs=getattr(args, "epochs", None))
    return gen, model, tr


def sidecar(ckpt) -> Path:
    return Path(str(ckpt) + ".cfg")


def load_model(ckpt) -> tuple[IFAModel, int]:
    """Rebuild a model from a checkpoint and its ``.cfg`` sidecar."""
    side = sidecar(ckpt)
    if not side.exists():
        raise FileNotFoundError(f"{side}: missing model config next to checkpoint")
    cfg = config.build("model", config.read_config(side).get("model"))
    digest, step, tensors = load_checkpoint(ckpt)
    if digest != cfg.digest():
        raise ConfigError(f"{ckpt}: config digest does not match {side}")
    model = IFAModel(cfg)
    model.params.load_state(tensors)
    return model, step


def _fmt_auc(result: dict) -> str:
    return " ".join(f"auc_{k}={'NA' if v is None else f'{v:.6f}'}" for k, v in result.items())


def cmd_generate(args):
    gen, _, _ = _sections(args)
    count = write_dataset(args.out, generate(gen))
    print(f"wrote {count} requests to {args.out}")
    return EXIT_OK


def cmd_train(args):
    _, mcfg, tcfg = _sections(args)
    model = IFAModel(mcfg)
    log_path = args.log or str(args.ckpt) + ".log"
    Path(log_path).unlink(missing_ok=True)
    tlog = train(read_dataset(args.data), model, tcfg, log_path=log_path)
    save_checkpoint(args.ckpt, model.params, mcfg.digest(), tlog.step)
    config.write_model_config(sidecar(args.ckpt), mcfg)
    print(f"steps={tlog.step} progressive {_fmt_auc(tlog.progressive)}")
    print(f"checkpoint {args.ckpt}, log {log_path}")
    return EXIT_OK


def cmd_eval(args):
    model, step = load_model(args.ckpt)
    result = evaluate(model, read_dataset(args.data))
    print(f"step={step} {_fmt_auc(result)}")
    return EXIT_OK


def _table(args, variants):
    _, mcfg, tcfg = _sections(args)
    train_reqs, test_reqs = experiments.split_holdout(read_dataset(args.data), args.holdout)
    rows = experiments.run_variants(train_reqs, test_reqs, mcfg, tcfg, variants)
    print(experiments.format_table(rows))
    return EXIT_OK


def cmd_ablate(args):
    return _table(args, experiments.ABLATIONS)


def cmd_compare(args):
    return _table(args, experiments.BASELINES)


def cmd_check(args):
    results = checks.run_all(fault=args.fault)
    print(f"{'suite':<14}{'status':<8}{'max_error':>12}{'tolerance':>12}  detail")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<14}{status:<8}{r.max_error:>12.3e}{r.tolerance:>12.1e}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_bench(args):
    try:
        grid = bench.parse_grid(args.grid)
        result = bench.run_bench(grid, args.kind, d=args.d, reps=args.reps, warmup=args.warmup, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bench.write_records(args.out, result)
    for c in result.cells:
        print(f"m={c.m} n={c.n} mean_s={c.mean_s:.6g} std_s={c.std_s:.3g} reps={c.reps} per_item_s={c.per_item_s:.3g}")
    for m, n, why in result.skipped:
        print(f"skipped m={m} n={n}: {why}")
    if result.slope is not None:
        print(f"loglog slope vs {result.slope_axis}: {result.slope:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifa", description="Normalized linear cross-attention ranking model.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI file with [data], [model], [train] sections")
        sp.add_argument("--seed", type=int, help="overrides the seed in every section")
        return sp

    sp = with_config(sub.add_parser("generate", help="write a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-requests", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = with_config(sub.add_parser("train", help="evaluate-then-train over a dataset"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--log", help="training log path (default: <ckpt>.log)")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-action AUC of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_eval)

    for name, func, text in (("ablate", cmd_ablate, "IFA, IFA-RAM, IFA-FSM-RAM"),
                             ("compare", cmd_compare, "IFA against the baselines")):
        sp = with_config(sub.add_parser(name, help=text))
        sp.add_argument("--data", required=True)
        sp.add_argument("--holdout", type=float, default=0.2, help="trailing fraction held out")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.set_defaults(func=func)

    sp = sub.add_parser("check", help="run the property suites")
    sp.add_argument("--fault", choices=checks.FAULTS)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("bench", help="time attention forward passes")
    sp.add_argument("--grid", required=True, help="e.g. s=256..16384 or m=1024;n=256..16384")
    sp.add_argument("--kind", choices=("linear", "dense"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("IFA_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"ifa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataError) as exc:
        print(f"ifa: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
