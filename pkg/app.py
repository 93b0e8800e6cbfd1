import json
import logging
import sys

from layout import build_parser
from commands.gen_data import register as register_gen_data
from commands.train import register as register_train
from commands.render import register as register_render
from commands.extract import register as register_extract
from commands.evaluate import register as register_eval
from utils.helpers import configure_logging

logger = logging.getLogger("cli")


def build_app():
    """Parser with every command registered (pure structure lives in layout.py)."""
    parser, subparsers = build_parser()

    # Synthetic ground truth
    register_gen_data(subparsers)

    # Optimization
    register_train(subparsers)

    # render + relight
    register_render(subparsers)

    # Mesh export and metrics
    register_extract(subparsers)
    register_eval(subparsers)
    return parser


def main(argv=None) -> int:
    """Run one command; any failure becomes a single JSON line on stderr and exit status 1."""
    args = build_app().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return int(args.handler(args) or 0)
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        message = " ".join(str(e).split()) or type(e).__name__
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": message}) + "\n")
        return 1


# RUN APP
if __name__ == "__main__":
    sys.exit(main())
