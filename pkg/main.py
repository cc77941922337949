# ============================================================
# ssm-dynlab
# Command-line entry point
# ============================================================

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from config import SUBCOMMANDS, RunSpec, default_output_root, parse_overrides, resolve_seed
from errors import LabError
from experiments import RUNNERS

logger = logging.getLogger("ssmdynlab")


# -----------------------
# Argument parsing
# -----------------------
def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file with one section per subcommand")
    parser.add_argument("--output-dir", help="run directory (default: $SSMDYNLAB_OUTPUT/<subcommand>)")
    parser.add_argument("--seed", type=int, default=None, help="defaults to $SSMDYNLAB_SEED, then 0")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmdynlab", description="Selective state-space dynamics lab.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    for name in SUBCOMMANDS:
        cmd = sub.add_parser(name)
        _common(cmd)
        if name == "train":
            cmd.add_argument("--compare", action="store_true", help="train the Full / ALL / SLL precision grid")
            cmd.add_argument("--preset", help="learning-rate / rank preset, e.g. table3-small")
        if name == "lora-verify":
            cmd.add_argument("--checkpoint", help="adapter checkpoint written by train")
        if name == "report":
            cmd.add_argument("--serve", action="store_true", help="serve the index over HTTP")
            cmd.add_argument("--host")
            cmd.add_argument("--port", type=int)
    return parser


def build_spec(args: argparse.Namespace) -> RunSpec:
    if args.workers < 1:
        raise LabError("--workers must be at least 1")
    root = default_output_root()
    if args.subcommand == "report":
        output_dir = args.output_dir or root
    else:
        output_dir = args.output_dir or os.path.join(root, args.subcommand)
    options = {
        key: getattr(args, key)
        for key in ("compare", "preset", "checkpoint", "serve", "host", "port")
        if getattr(args, key, None) not in (None, False)
    }
    return RunSpec(
        subcommand=args.subcommand,
        config_path=args.config,
        output_dir=output_dir,
        seed=resolve_seed(args.seed),
        overrides=parse_overrides(args.overrides),
        workers=args.workers,
        options=options,
    )


def _error_line(e: Exception) -> str:
    payload = {"error": type(e).__name__, "message": getattr(e, "message", str(e))}
    if isinstance(e, LabError):
        payload.update(e.details())
    return json.dumps(payload, sort_keys=True, default=str)


# -----------------------
# Entry point
# -----------------------
def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        spec = build_spec(args)
        return RUNNERS[spec.subcommand](spec)
    except LabError as e:
        print(_error_line(e), file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(_error_line(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
