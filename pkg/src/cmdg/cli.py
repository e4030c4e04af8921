"""Command line entry point: ``cmdg run | compare | gen-data``.

Exit codes: 0 success, 1 configuration or input error, 2 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment
from .experiment import ConfigError
from .netcore import NonFiniteError

EXIT_CONFIG = 1
EXIT_NONFINITE = 2


def _config(args) -> dict:
    return experiment.apply_overrides(experiment.load_config(args.config), args.set or [])


def cmd_run(args) -> int:
    cfg = experiment.resolve_config(_config(args))
    if args.dry_run:
        sys.stdout.write(experiment.dumps(cfg))
        return 0
    summary = experiment.run_config(cfg)
    rows = experiment.compare_rows([(cfg["name"], summary)])
    sys.stdout.write(experiment.format_table(rows))
    return 0


def cmd_compare(args) -> int:
    if len(args.summaries) < 2:
        raise ConfigError("compare needs at least two summaries")
    summaries = [(path, experiment.load_summary(path)) for path in args.summaries]
    rows = experiment.compare_rows(summaries)
    sys.stdout.write(experiment.format_csv(rows) if args.csv else experiment.format_table(rows))
    return 0


def cmd_gen_data(args) -> int:
    out = experiment.generate_dataset(_config(args), args.out, args.seed)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmdg", description="Causal matching for domain generalization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate every experiment of a config")
    r.add_argument("config", help=f"config file or preset ({', '.join(experiment.preset_names())})")
    r.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (dotted key)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate two or more summary.json files")
    c.add_argument("summaries", nargs="+", help="two or more summary.json files")
    c.add_argument("--csv", action="store_true", help="emit CSV instead of an aligned table")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-data", help="write a config's dataset in the binary layout")
    g.add_argument("config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="run seed (default: first seed of the config)")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except json.JSONDecodeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
