"""
MoE Interp Toolkit - CLI
Probing, attribution, specialization and autointerp for toy Mixture-of-Experts models
"""
import argparse
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from commands import attribute, autointerp, model, probe, specialize  # noqa: E402
from services.errors import InterpError  # noqa: E402
from services.manifest import TOOLKIT_VERSION  # noqa: E402

logger = logging.getLogger("moe_interp")

# Load environment variables
# 1. local .env next to main.py
# 2. then .env in the working directory
current_dir = Path(__file__).parent
load_dotenv(current_dir / ".env", override=False)
load_dotenv(Path.cwd() / ".env", override=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-interp", description="Interpretability toolkit for toy MoE transformers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOLKIT_VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in (model, probe, attribute, specialize, autointerp):
        command.register(subparsers)
    return parser


def setup_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else os.getenv("MOE_INTERP_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except InterpError as e:
        logger.error(f"[{args.command}] {type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
