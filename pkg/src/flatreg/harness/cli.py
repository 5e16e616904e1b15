"""``flatreg <command> [--config PATH] [--seed N] [--out DIR]``.

Exit status: 0 when every check passes, 1 when a check fails, 2 on a
configuration error.
"""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from ..errors import ConfigError
from .config import EXPERIMENTS, default_config, load_config
from .experiments import COMMANDS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flatreg", description="Label-noise SGD implicit regularization experiments.")
    ap.add_argument("command", choices=EXPERIMENTS)
    ap.add_argument("--config", help="INI config, or a manifest.json from an earlier run; defaults apply if omitted")
    ap.add_argument("--seed", type=int, help="override [run] seed")
    ap.add_argument("--out", help="run directory (default: [run] out, else runs/<command>)")
    ap.add_argument("--print-config", action="store_true", help="print the resolved config as INI and exit")
    ap.add_argument("--quiet", action="store_true", help="only print the final line of the report")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command) if args.config else default_config(args.command)
        cfg = cfg.with_overrides(seed=args.seed, out=args.out)
        if args.print_config:
            print(cfg.to_ini())
            return EXIT_OK
        art = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = art.report()
    print(report.splitlines()[-1] if args.quiet else report)
    print(f"artifacts: {art.out_dir}")
    return EXIT_OK if art.passed else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
