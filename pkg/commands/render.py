# -------------------------------------------------------------------
# Single responsibility: images from a trained checkpoint
#   - render:  one camera, the learned light
#   - relight: every camera, a PFM environment or named light, optional albedo edit
# -------------------------------------------------------------------

from __future__ import annotations
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from commands.common import (
    load_config,
    oracle_config,
    parse_floats,
    path_arg,
    require_file,
    threads_of,
    writable_dir,
)
from layout import add_config_flag
from services.cameras import Camera, load_cameras, load_dataset
from services.metrics import psnr
from services.oracle import TrainedScene, forward_render
from services.renderer import render_view
from services.scenes import NAMED_LIGHTS, EditedMaterial, EquirectLight, named_light
from services.shading import make_shading_fn
from services.trainer import TrainedFields, load_trained
from utils.helpers import read_pfm, write_image
from utils.ids import IDS

logger = logging.getLogger("cli")

RENDER_MODES = ("volume", "surface")


# ---------- Helpers ----------
def render_image(trained: TrainedFields, camera: Camera, t_near: float, t_far: float, *, mode: str = "volume",
                 light=None, material=None, samples: Optional[int] = None, k: Optional[int] = None,
                 oracle_cfg=None, threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    (linear image, coverage) of the trained fields at `camera`.
    `light` / `material` replace the learned light / material field when given.
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode '{mode}' (available: {', '.join(RENDER_MODES)})")
    cfg = trained.config
    fields = trained.fields
    light = light if light is not None else fields.light
    material = material if material is not None else fields.material
    k = k or cfg.quadrature_k

    if mode == "volume":
        def bind_sources(graph):
            return fields.geometry, make_shading_fn(material, light, k)
        return render_view(camera, t_near, t_far, samples or cfg.samples, bind_sources, trained.kappa,
                           cfg.shading_cutoff, threads=threads)

    ocfg = replace(oracle_cfg or oracle_config({}), t_near=t_near, t_far=t_far)
    image, mask, _ = forward_render(TrainedScene(fields.geometry, material, light), camera, ocfg, k=k,
                                    threads=threads)
    return image, mask


def resolve_light(choice: str):
    """A PFM environment map path or a named analytic light."""
    path = Path(choice)
    if path.suffix.lower() == ".pfm" or path.exists():
        require_file(path, "light")
        return EquirectLight(read_pfm(path))
    if choice in NAMED_LIGHTS:
        return named_light(choice)
    raise ValueError(f"light file not found: {choice} (or use a named light: {', '.join(sorted(NAMED_LIGHTS))})")


def _cameras(args, config) -> Tuple[List[Camera], float, float]:
    source = args.cameras or path_arg(args, config, "data")
    return load_cameras(source)


# ---------- Commands ----------
def run_render(args) -> int:
    config = load_config(args)
    ckpt = require_file(path_arg(args, config, "checkpoint"), "checkpoint")
    cameras, t_near, t_far = _cameras(args, config)
    if not 0 <= args.view < len(cameras):
        raise ValueError(f"--view {args.view} outside [0, {len(cameras)})")
    trained = load_trained(ckpt)
    threads = threads_of(args, config)

    image, _ = render_image(trained, cameras[args.view], t_near, t_far, mode=args.mode, samples=args.samples,
                            oracle_cfg=oracle_config(config), threads=threads)
    out = Path(args.out)
    write_image(out, image, bits=8, srgb=True)
    print(f"wrote {out}")

    data = path_arg(args, config, "data", required=False)
    if data is not None and (data / IDS.IMAGES_DIR).is_dir():
        ds = load_dataset(data)
        views = {v.index: v for v in ds.views}
        if args.view in views:
            score = psnr(np.clip(image, 0.0, 1.0), views[args.view].image)
            print(f"PSNR vs training view {args.view}: {score:.2f} dB")
    return 0


def run_relight(args) -> int:
    config = load_config(args)
    ckpt = require_file(path_arg(args, config, "checkpoint"), "checkpoint")
    light = resolve_light(args.light)
    cameras, t_near, t_far = _cameras(args, config)
    out = writable_dir(Path(args.out), "output")
    trained = load_trained(ckpt)
    threads = threads_of(args, config)

    material = trained.fields.material
    if args.edit_albedo or args.edit_box:
        if not (args.edit_albedo and args.edit_box):
            raise ValueError("--edit-albedo and --edit-box must be given together")
        box = parse_floats(args.edit_box, 6, "edit-box")
        material = EditedMaterial(material, parse_floats(args.edit_albedo, 3, "edit-albedo"), box[:3], box[3:])

    views = range(len(cameras)) if args.view is None else [args.view]
    for i in views:
        if not 0 <= i < len(cameras):
            raise ValueError(f"--view {i} outside [0, {len(cameras)})")
        image, _ = render_image(trained, cameras[i], t_near, t_far, mode=args.mode, light=light, material=material,
                                samples=args.samples, oracle_cfg=oracle_config(config), threads=threads)
        write_image(out / (IDS.VIEW_PATTERN % i), image, bits=8, srgb=True)
    print(f"wrote {len(views)} relit view(s) to {out}")
    return 0


def _common_flags(sub) -> None:
    sub.add_argument("--checkpoint", default=None, help="checkpoint archive (.npz)")
    sub.add_argument("--data", default=None, help="dataset directory (cameras, and images for a PSNR check)")
    sub.add_argument("--cameras", default=None, help="cameras.json to use instead of the dataset's")
    sub.add_argument("--mode", choices=RENDER_MODES, default="volume",
                     help="volume: training renderer; surface: sphere tracing + shading at the hit")
    sub.add_argument("--samples", type=int, default=None, help="samples per ray (volume mode)")
    add_config_flag(sub)


def register(subparsers) -> None:
    render = subparsers.add_parser("render", help="render one camera with the trained fields (sRGB PNG)")
    _common_flags(render)
    render.add_argument("--view", type=int, default=0, help="camera index")
    render.add_argument("--out", required=True, help="output PNG path")
    render.set_defaults(handler=run_render)

    relight = subparsers.add_parser("relight", help="render under a new light (PFM map or named light)")
    _common_flags(relight)
    relight.add_argument("--light", required=True,
                         help=f"PFM environment map or one of: {', '.join(sorted(NAMED_LIGHTS))}")
    relight.add_argument("--view", type=int, default=None, help="single camera index (default: all)")
    relight.add_argument("--edit-albedo", default=None, help="r,g,b albedo painted inside --edit-box")
    relight.add_argument("--edit-box", default=None, help="x0,y0,z0,x1,y1,z1 axis-aligned edit box")
    relight.add_argument("--out", required=True, help="output directory")
    relight.set_defaults(handler=run_relight)
