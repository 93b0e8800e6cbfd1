import argparse
import json
import sys

from utils.ids import IDS


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are one JSON line on stderr (exit status 2)."""

    def error(self, message: str):
        sys.stderr.write(json.dumps({"error": "ArgumentError", "message": f"{self.prog}: {message}"}) + "\n")
        sys.exit(2)


def build_parser():
    """Return (parser, subparsers): global flags plus an empty sub-command table (no handlers here)."""
    parser = CliParser(
        prog="app.py",
        description="Inverse rendering from posed images: geometry, PBR materials and lighting "
                    "as neural fields, with relightable mesh export.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (fallback: ${IDS.THREADS_ENV}, then 1); never changes results")

    # Sub-commands: each commands/<name>.py adds its own parser via register(subparsers)
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    return parser, subparsers


def add_config_flag(sub: argparse.ArgumentParser, required: bool = False) -> None:
    sub.add_argument("--config", default=None, required=required,
                     help="run config JSON (blocks: training, oracle, eval, paths, seed, threads); flags override it")


def add_seed_flag(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=None, help="overrides the config seed")
