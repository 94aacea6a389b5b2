"""Command-line entry point: ``causalshot {generate,train,eval,sweep,ablate,explain}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, metrics
from .config import ConfigError, RunConfig
from .experiment import DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("causalshot")

# flag name -> RunConfig field
_RUN_FLAGS = {
    "experiment": str, "causality": str, "method": str, "p": float, "seed": int, "preset": str,
    "train_tasks": int, "val_tasks": int, "test_tasks": int, "val_every": int, "lr": float,
    "weight_decay": float, "epochs": int, "margin": float, "eval_seed": int,
}


def _add_run_flags(sp):
    sp.add_argument("--config", help="JSON run config; flags override its values")
    sp.add_argument("--data", dest="data_dir", help="dataset directory")
    sp.add_argument("--out", dest="out_dir", help="output directory")
    for name, typ in _RUN_FLAGS.items():
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in (*_RUN_FLAGS, "data_dir", "out_dir")}
    if args.config:
        return RunConfig.load(args.config, **overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causalshot", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic planted-causality dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    for subset, n in data.REFERENCE_SPLIT_COUNTS.items():
        g.add_argument(f"--{subset}", type=int, default=n, help=f"{subset} images (default {n})")
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--domain-shift", type=float, default=None)
    g.add_argument("--background", type=float, default=None)
    g.add_argument("--blob-sigma", type=float, default=None)

    for name, text in (("train", "meta-train one configuration and meta-test it"),
                       ("sweep", "run the 15 causality settings plus both ablations"),
                       ("ablate", "baseline against both random-factor ablations")):
        sp = sub.add_parser(name, help=text)
        _add_run_flags(sp)
        if name != "train":
            sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    e = sub.add_parser("eval", help="meta-test a saved checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", dest="data_dir", required=True)
    e.add_argument("--out", default=None, help="results JSON path (default: next to the checkpoint)")
    e.add_argument("--test-tasks", type=int, default=None)
    e.add_argument("--eval-seed", type=int, default=None)

    x = sub.add_parser("explain", help="Grad-CAM comparison panels")
    x.add_argument("--data", dest="data_dir", required=True)
    x.add_argument("--out", required=True)
    for v in ("baseline", "mulcat", "mulcatbool"):
        x.add_argument(f"--{v}", help=f"{v} checkpoint")
    x.add_argument("--tasks", type=int, default=20)
    x.add_argument("--max-cases", type=int, default=10)
    x.add_argument("--seed", type=int, default=0)
    return ap


def cmd_generate(args) -> int:
    kw = {"image_size": args.image_size}
    for flag, name in (("noise", "noise_level"), ("domain_shift", "domain_shift"),
                       ("background", "background_level"), ("blob_sigma", "blob_sigma")):
        if getattr(args, flag) is not None:
            kw[name] = getattr(args, flag)
    try:
        spec = data.SyntheticSceneSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    from .experiment import generate

    counts = {"train": args.train, "val": args.val, "test": args.test}
    try:
        summary = generate(args.out, spec, counts, args.seed)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from None
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def _print_result(res: dict) -> None:
    if "error" in res:
        print(f"{res['setting']}: FAILED {res['error']}")
        return
    cells = "  ".join(f"{m} {metrics.format_mean_sd(*v)}" for m, v in res["test"].items())
    print(f"{res['setting']}: {cells}  (val {res['val_auroc']:.3f})")


def cmd_train(args) -> int:
    from .experiment import train

    cfg = _run_config(args)
    res = train(cfg)
    _print_result(res)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import evaluate_checkpoint
    from .model import CausalBDCNet

    try:
        net, header = CausalBDCNet.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    d = dict(header.get("config") or {})
    d["data_dir"] = args.data_dir
    for name in ("test_tasks", "eval_seed"):
        if getattr(args, name) is not None:
            d[name] = getattr(args, name)
    cfg = RunConfig.from_dict(d)
    res = evaluate_checkpoint(cfg, args.checkpoint, net=net)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    out.write_text(json.dumps(res, indent=1, sort_keys=True))
    _print_result(res)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import sweep

    cfg = _run_config(args)
    results, (sweep_csv, table_csv) = sweep(cfg, jobs=args.jobs)
    for r in results:
        _print_result(r)
    print(f"wrote {sweep_csv} and {table_csv}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import ablate

    cfg = _run_config(args)
    results, path = ablate(cfg, jobs=args.jobs)
    for r in results:
        _print_result(r)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .experiment import explain_cases, load_pool
    from .model import CausalBDCNet

    ckpts = {v: getattr(args, v) for v in ("baseline", "mulcat", "mulcatbool") if getattr(args, v)}
    if not ckpts:
        raise ConfigError("explain needs at least one of --baseline/--mulcat/--mulcatbool")
    nets, experiment = {}, None
    for name, path in ckpts.items():
        try:
            net, header = CausalBDCNet.load(path)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot load checkpoint {path}: {exc}") from None
        nets[name] = net
        exp = (header.get("config") or {}).get("experiment", "2way")
        if experiment not in (None, exp):
            raise ConfigError("checkpoints come from different experiments")
        experiment = exp
    pool = load_pool(args.data_dir)
    summary = explain_cases(nets, pool, experiment, args.out, n_tasks=args.tasks,
                            max_cases=args.max_cases, seed=args.seed)
    if not summary["panels"]:
        print("no test case was classified correctly by every model; no panels written")
    else:
        print(f"wrote {len(summary['panels'])} panels to {args.out}")
    for name, m in summary["box_mass"].items():
        print(f"{name}: heatmap mass inside artifact boxes {'n/a' if m is None else f'{m:.3f}'}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "explain": cmd_explain}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .experiment import thread_limit

    try:
        with thread_limit():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
