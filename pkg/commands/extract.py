# -------------------------------------------------------------------
# Single responsibility: checkpoint -> baked mesh (OBJ + PBR CSV, or PLY)
# -------------------------------------------------------------------

from __future__ import annotations
import logging
from pathlib import Path

from commands.common import load_config, path_arg, require_file, threads_of
from layout import add_config_flag
from services import meshing
from services.trainer import load_trained

logger = logging.getLogger("cli")


def run(args) -> int:
    config = load_config(args)
    ckpt = require_file(path_arg(args, config, "checkpoint"), "checkpoint")
    out = Path(args.out)
    fmt = args.format or out.suffix.lstrip(".").lower() or "ply"
    if fmt not in meshing.MESH_FORMATS:
        raise ValueError(f"unknown mesh format '{fmt}' (available: {', '.join(meshing.MESH_FORMATS)})")
    if not out.suffix:
        out = out.with_suffix("." + fmt)

    trained = load_trained(ckpt)
    fields = trained.fields
    mesh = meshing.marching_cubes(fields.geometry.sdf, args.bound, args.res, threads_of(args, config))
    if mesh.empty:
        raise ValueError("the trained SDF has no zero crossing inside the bounds; nothing to extract")
    mesh = meshing.bake_attributes(mesh, fields.geometry, fields.material)
    written = meshing.export_mesh(mesh, out, fmt)

    stats = meshing.mesh_stats(mesh)
    print(", ".join(f"{k}: {v}" for k, v in stats.items()))
    for path in written:
        print(f"wrote {path}")
    return 0


def register(subparsers) -> None:
    sub = subparsers.add_parser("extract", help="marching-cubes mesh with baked normals and PBR attributes")
    sub.add_argument("--checkpoint", default=None, help="checkpoint archive (.npz)")
    sub.add_argument("--res", type=int, default=128, help="grid resolution per axis")
    sub.add_argument("--bound", type=float, default=1.0, help="half-width of the extraction cube")
    sub.add_argument("--format", choices=meshing.MESH_FORMATS, default=None, help="default: from --out suffix")
    sub.add_argument("--out", required=True, help="mesh path (.obj or .ply)")
    add_config_flag(sub)
    sub.set_defaults(handler=run)
