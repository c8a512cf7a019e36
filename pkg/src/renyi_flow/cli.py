"""``renyi-flow <command> --config PATH --out DIR [--seed U64] [--alpha F]``.

Exit status: 0 when every property asserted by the command holds, 1 when
one fails, 2 for configuration or usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from .config import ConfigError
from .experiments import COMMANDS

log = logging.getLogger("renyi_flow")


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="renyi-flow", description="alpha-Renyi particle ensemble experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML run configuration (optional for 'check')")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=_seed, help="override the config seed")
    p.add_argument("--alpha", type=float, help="override the config alpha")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, default_model, default_dataset = COMMANDS[args.command]
    try:
        if args.config is None:
            if args.command != "check":
                raise ConfigError("--config", "required for this command")
            raw: dict = {}
        else:
            raw = config_mod.read_raw(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.alpha is not None:
            raw["alpha"] = args.alpha
        cfg = config_mod.resolve(raw, default_model=default_model, default_dataset=default_dataset)
        result = fn(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for name in result.files:
        log.info("wrote %s", result.out_dir / name)
    props = result.report.get("properties", {})
    for key in sorted(props):
        print(f"{'PASS' if props[key] else 'FAIL'} {key}")
    if "suites" in result.report:
        for name, rec in result.report["suites"].items():
            print(f"{'PASS' if rec['passed'] else 'FAIL'} {name} ({rec['failures']} of {rec['instances']} failed)")
    return 0 if result.passed else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
