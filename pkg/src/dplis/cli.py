"""Command line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import ConfigError, ExperimentConfig, load_config, run_experiment

COMMANDS = {
    "train": None,  # task comes from the config (mnist_mlp or synthetic_blobs)
    "toy": "toy",
    "sharpness": "sharpness",
    "slice": "slice",
    "pate": "pate",
    "accountant": "accountant",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dplis", description="DP-SGD with loss smoothing: experiments and tools")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", metavar="PATH", help="key = value config file")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--out", metavar="DIR", default=None, help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
    # flags for the aggregation pipeline
    pate_p = sub.choices["pate"]
    for flag, kind in (("teachers", int), ("threshold", float), ("sigma1", float), ("sigma2", float),
                       ("max-queries", int), ("sigma-smooth", float), ("samples", int)):
        pate_p.add_argument(f"--{flag}", type=kind, dest=f"pate_{flag.replace('-', '_')}")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed}
    if args.command == "pate":
        overrides.update({k: v for k, v in vars(args).items() if k.startswith("pate_")})
    task = COMMANDS[args.command]
    try:
        if args.config:
            cfg = load_config(args.config, **overrides)
        else:
            cfg = ExperimentConfig(task=task or "synthetic_blobs", **{k: v for k, v in overrides.items() if v is not None})
        if task is not None and cfg.task != task:
            cfg = cfg.replace(task=task)
        if task is None and cfg.task not in ("mnist_mlp", "synthetic_blobs"):
            raise ConfigError(f"train needs task mnist_mlp or synthetic_blobs, config says {cfg.task!r}")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        res = run_experiment(cfg, args.out)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for row in res.rows[:10]:
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    if len(res.rows) > 10:
        print(f"... {len(res.rows)} rows")
    return 0


if __name__ == "__main__":
    sys.exit(main())
