# -------------------------------------------------------------------
# Single responsibility: render a synthetic dataset from a stock scene
# -------------------------------------------------------------------

from __future__ import annotations
import logging

from commands.common import load_config, oracle_config, parse_resolution, path_arg, seed_of, threads_of
from layout import add_config_flag, add_seed_flag
from services.oracle import generate_dataset
from services.scenes import STOCK_SCENES, stock_scene

logger = logging.getLogger("cli")


def run(args) -> int:
    config = load_config(args)
    scene = stock_scene(args.scene)
    out = path_arg(args, config, "out")
    path = generate_dataset(
        scene,
        n_views=args.views,
        resolution=parse_resolution(args.res),
        seed=seed_of(args, config),
        out_dir=out,
        cfg=oracle_config(config),
        threads=threads_of(args, config),
    )
    print(f"dataset written to {path}")
    return 0


def register(subparsers) -> None:
    sub = subparsers.add_parser("gen-data", help="render a synthetic dataset with ground truth")
    sub.add_argument("--scene", required=True, help=f"stock scene ({', '.join(sorted(STOCK_SCENES))})")
    sub.add_argument("--views", type=int, default=16, help="number of cameras (>= 2)")
    sub.add_argument("--res", default="64", help="image size, 64 or WIDTHxHEIGHT")
    sub.add_argument("--out", default=None, help="dataset directory")
    add_seed_flag(sub)
    add_config_flag(sub)
    sub.set_defaults(handler=run)
