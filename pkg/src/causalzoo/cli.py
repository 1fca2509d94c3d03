"""Command-line front end.

Subcommands: zoo-build, explain, effects, analyze, reproduce. A JSON config
file pins every parameter and seed; --set overrides individual fields and
--seed rederives all seeds from one master value. Exit codes: 0 success,
2 configuration error, 3 data/estimation error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .config import (OUTPUT_ENV_VAR, config_from_dict, config_to_dict,
                     default_config, load_config, override_all_seeds, set_dotted)
from .errors import (ConfigurationError, EstimationError, FormatError,
                     InputError, NumericalError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_COMMANDS = {
    "zoo-build": pipeline.cmd_zoo_build,
    "explain": pipeline.cmd_explain,
    "effects": pipeline.cmd_effects,
    "analyze": pipeline.cmd_analyze,
    "reproduce": pipeline.cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalzoo",
        description="Train a seeded zoo of small classifiers and measure the "
                    "treatment effects of hyperparameters on predictions and "
                    "saliency explanations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        p.add_argument("-c", "--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("-o", "--out", default=os.environ.get(OUTPUT_ENV_VAR),
                       help=f"output root directory (or ${OUTPUT_ENV_VAR})")
        p.add_argument("--seed", type=int, default=None,
                       help="override every pipeline seed from one master seed")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config field (JSON-parsed value)")
    cfg = sub.add_parser("write-config", help="write the default config as JSON")
    cfg.add_argument("path", help="where to write the config template")
    return parser


def _resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config()
    if args.set:
        doc = config_to_dict(cfg)
        for item in args.set:
            if "=" not in item:
                raise ConfigurationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            key, _, raw = item.partition("=")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw  # bare strings allowed
            set_dotted(doc, key, value)
        cfg = config_from_dict(doc)
    if args.seed is not None:
        cfg = override_all_seeds(cfg, args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "write-config":
            from .config import save_config
            save_config(default_config(), args.path)
            print(f"wrote default config to {args.path}")
            return EXIT_OK
        if not args.out:
            raise ConfigurationError(
                f"no output root: pass -o/--out or set ${OUTPUT_ENV_VAR}")
        cfg = _resolve_config(args)
        result = _COMMANDS[args.command](cfg, args.out)
        if isinstance(result, dict):
            for stage, path in result.items():
                print(f"{stage}: {path}")
        else:
            print(result)
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, EstimationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
