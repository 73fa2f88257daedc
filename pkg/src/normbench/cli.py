"""Command line entry point: ``normbench {run,sweep,reestimate,report}``."""
from __future__ import annotations

import argparse
import json
import sys

from . import checkpoint as ckpt_io
from . import config as cfgmod
from . import experiment

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p):
    p.add_argument("--config", help="config file (section.key = value lines)")
    p.add_argument("--preset", help="named (lambda, nu) preset, e.g. paper-postnorm-nmt")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--lambda", dest="lam", type=float, help="mean penalty weight")
    p.add_argument("--nu", type=float, help="std penalty weight")


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="normbench", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train one model and write metrics")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="grid over (lambda, nu, seed)")
    _add_config_flags(p)
    p.add_argument("--lambdas", type=_floats, default=list(cfgmod.SWEEP_GRID))
    p.add_argument("--nus", type=_floats, default=list(cfgmod.SWEEP_GRID))
    p.add_argument("--seeds", type=_ints, default=[0])

    p = sub.add_parser("reestimate", help="refresh running statistics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="path of the updated checkpoint")
    p.add_argument("--epochs", type=int, default=2)

    p = sub.add_parser("report", help="re-derive a run summary from its CSVs")
    p.add_argument("run_dir")

    sub.add_parser("keys", help="list every config key with its default")
    return ap


def _resolve(args, penalties=True):
    overrides = {"seed": args.seed, "out": args.out}
    if penalties:
        overrides.update({"norm.lambda": args.lam, "norm.nu": args.nu})
    return cfgmod.resolve(args.config, args.preset, overrides)


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        if args.verb == "keys":
            for key, default, doc in cfgmod.describe():
                print(f"{key} = {default}    # {doc}")
            return EXIT_OK
        if args.verb == "report":
            print(json.dumps(experiment.report(args.run_dir), indent=2, sort_keys=True))
            return EXIT_OK
        if args.verb == "reestimate":
            experiment.reestimate_file(args.checkpoint, args.out, args.epochs)
            print(f"wrote {args.out}")
            return EXIT_OK
        cfg = _resolve(args, penalties=args.verb == "run")
        if args.verb == "run":
            try:
                summary = experiment.run(cfg)
            except experiment.RunDiverged as exc:
                print(f"normbench: run diverged: {exc}", file=sys.stderr)
                return EXIT_DIVERGED
            print(summary.to_json())
            return EXIT_OK
        if args.lam is not None:
            args.lambdas = [args.lam]
        if args.nu is not None:
            args.nus = [args.nu]
        result = experiment.sweep(cfg, args.lambdas, args.nus, args.seeds, cfg.out)
        print(json.dumps({"best": result["best"], "excluded": result["excluded"]}, indent=2))
        return EXIT_OK if result["best"] is not None else EXIT_DIVERGED
    except cfgmod.ConfigError as exc:
        print(f"normbench: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ckpt_io.CheckpointError, ValueError, OSError) as exc:
        print(f"normbench: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
