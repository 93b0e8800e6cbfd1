# -------------------------------------------------------------------
# Single responsibility: dataset -> training run (checkpoints, CSV log)
# -------------------------------------------------------------------

from __future__ import annotations
import logging

from commands.common import load_config, path_arg, require_dir, threads_of, training_config, writable_dir
from layout import add_config_flag, add_seed_flag
from services.cameras import load_dataset
from services.trainer import train
from services.transforms import loss_drop

logger = logging.getLogger("cli")


def run(args) -> int:
    config = load_config(args)
    cfg = training_config(args, config)
    data = require_dir(path_arg(args, config, "data"), "dataset")
    out = writable_dir(path_arg(args, config, "out"), "run")
    threads = threads_of(args, config)

    ds = load_dataset(data)
    result = train(cfg, ds, out, resume=args.resume, force=args.force, threads=threads)

    print(f"final checkpoint: {result.checkpoint}")
    if not result.log.empty:
        last = result.log.iloc[-1]
        print(f"iterations logged: {len(result.log)}  final total loss: {last['total']:.6f}  "
              f"loss drop: {100.0 * loss_drop(result.log):.1f}%")
    return 0


def register(subparsers) -> None:
    sub = subparsers.add_parser("train", help="optimize geometry, material and light fields")
    sub.add_argument("--data", default=None, help="dataset directory (from gen-data)")
    sub.add_argument("--out", default=None, help="run directory for checkpoints and logs")
    sub.add_argument("--iterations", type=int, default=None, help="overrides training.iterations")
    sub.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    sub.add_argument("--force", action="store_true", help="resume even if the checkpoint config differs")
    add_seed_flag(sub)
    add_config_flag(sub)
    sub.set_defaults(handler=run)
