"""
Ground-truth generator and surface-mode renderer.

`forward_render` sphere-traces any geometry source, then shades each hit with
the same BRDF and quadrature code used in training. Analytic scenes give the
oracle images; trained fields (`TrainedScene`) give the relightable-asset
renders used by `render --mode surface`, `relight` and evaluation.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from services import meshing
from services.cameras import Camera, generate_rays, orbit_cameras, write_cameras
from services.scenes import AnalyticScene, bake_equirect
from services.shading import shade
from utils.helpers import write_image, write_pfm
from utils.ids import IDS
from utils.jsonloaders import write_json

logger = logging.getLogger("oracle")

# ---- SETTINGS ----
NORMAL_STEP = 1e-5
ROW_CHUNK = 8


@dataclass
class OracleRenderConfig:
    max_steps: int = 256
    tolerance: float = 1e-5
    quadrature_k: int = 256
    fov_degrees: float = 40.0
    camera_radius: float = 2.5
    camera_jitter: float = 0.05
    t_near: float = 1.0
    t_far: float = 4.0
    image_bits: int = 16
    light_map_size: Tuple[int, int] = (32, 64)
    mesh_resolution: int = 128
    mesh_bound: float = 1.0

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.quadrature_k < 8:
            raise ValueError(f"quadrature_k must be >= 8, got {self.quadrature_k}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0.0 < self.t_near < self.t_far:
            raise ValueError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")
        self.light_map_size = tuple(int(x) for x in self.light_map_size)


class TrainedScene:
    """Trained (or partly swapped) sources behind the analytic-scene interface."""

    def __init__(self, geometry, material, light) -> None:
        self.geometry = geometry
        self.material_src = material
        self.light = light

    def sdf(self, points):
        return self.geometry.sdf(points)

    def sdf_and_gradient(self, points, with_gradient: bool = True):
        return self.geometry.sdf_and_gradient(points, with_gradient)

    def sdf_nodes(self, graph, points, with_gradient=False):
        return self.geometry.sdf_nodes(graph, points, with_gradient)

    def material(self, points):
        return self.material_src.material(points)

    def material_nodes(self, graph, points):
        return self.material_src.material_nodes(graph, points)


# ---------- Sphere tracing ----------

def sphere_trace(scene, origins: np.ndarray, dirs: np.ndarray, t_near: float, t_far: float,
                 max_steps: int = 256, tolerance: float = 1e-5):
    """
    March every ray by its SDF value until |sdf| < tolerance.
    Returns (hit (N,), points (N, 3), normals (N, 3), depth (N,)); misses hold zeros.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(origins)
    t = np.full(n, float(t_near))
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)

    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d = scene.sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = np.abs(d) < tolerance
        hit[idx[done]] = True
        active[idx[done]] = False
        step_idx = idx[~done]
        t[step_idx] += d[~done]
        escaped = t[step_idx] > t_far
        active[step_idx[escaped]] = False

    points = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    depth = np.zeros(n)
    if hit.any():
        points[hit] = origins[hit] + t[hit, None] * dirs[hit]
        normals[hit] = central_normals(scene, points[hit])
        depth[hit] = t[hit]
    return hit, points, normals, depth


def central_normals(scene, points: np.ndarray, step: float = NORMAL_STEP) -> np.ndarray:
    grad = np.empty_like(points)
    for a in range(3):
        offset = np.zeros(3)
        offset[a] = step
        grad[:, a] = (scene.sdf(points + offset) - scene.sdf(points - offset)) / (2.0 * step)
    return grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-300)


# ---------- Rendering ----------

def forward_render(scene, camera: Camera, cfg: Optional[OracleRenderConfig] = None, light=None,
                   k: Optional[int] = None, threads: int = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    (image (H, W, 3), mask (H, W), depth (H, W)) of `scene` seen by `camera`.
    Misses are black with mask 0; `light` overrides the scene light (relighting).
    """
    cfg = cfg or OracleRenderConfig()
    light = light if light is not None else scene.light
    k = k or cfg.quadrature_k
    width, height = camera.resolution
    row_starts = list(range(0, height, ROW_CHUNK))

    def run(r0: int):
        rows = np.arange(r0, min(r0 + ROW_CHUNK, height))
        vv, uu = np.meshgrid(rows, np.arange(width), indexing="ij")
        origins, dirs = generate_rays(camera, uu.reshape(-1), vv.reshape(-1))
        hit, points, normals, depth = sphere_trace(scene, origins, dirs, cfg.t_near, cfg.t_far,
                                                   cfg.max_steps, cfg.tolerance)
        color = np.zeros((len(dirs), 3))
        if hit.any():
            mat = scene.material(points[hit])
            color[hit], _ = shade(points[hit], normals[hit], -dirs[hit], mat, light, k)
        return color, hit.astype(np.float64), depth

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, row_starts))
    else:
        parts = [run(r) for r in row_starts]

    image = np.concatenate([p[0] for p in parts]).reshape(height, width, 3)
    mask = np.concatenate([p[1] for p in parts]).reshape(height, width)
    depth = np.concatenate([p[2] for p in parts]).reshape(height, width)
    return image, mask, depth


# ---------- Dataset generation ----------

def generate_dataset(scene: AnalyticScene, n_views: int, resolution: Tuple[int, int], seed: int,
                     out_dir: Union[str, Path], cfg: Optional[OracleRenderConfig] = None,
                     threads: int = 1) -> Path:
    """
    Render `scene` from `n_views` Fibonacci cameras (seeded jitter) and write:
    cameras.json, images/, masks/, light_gt.pfm, material_gt.json, mesh_gt.ply.
    """
    if n_views < 2:
        raise ValueError(f"n_views must be >= 2, got {n_views}")
    cfg = cfg or OracleRenderConfig()
    out = Path(out_dir)
    try:
        (out / IDS.IMAGES_DIR).mkdir(parents=True, exist_ok=True)
        (out / IDS.MASKS_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValueError(f"cannot write dataset to {out}: {e.strerror or e}")

    cameras = orbit_cameras(n_views, cfg.camera_radius, resolution, cfg.fov_degrees, seed, cfg.camera_jitter)
    for i, camera in enumerate(tqdm(cameras, desc="gen-data", disable=None, leave=False)):
        image, mask, _ = forward_render(scene, camera, cfg, threads=threads)
        write_image(out / IDS.IMAGES_DIR / (IDS.VIEW_PATTERN % i), image, bits=cfg.image_bits)
        write_image(out / IDS.MASKS_DIR / (IDS.VIEW_PATTERN % i), mask, bits=8)

    write_cameras(out / IDS.CAMERAS_JSON, cameras, cfg.t_near, cfg.t_far)
    write_pfm(out / IDS.LIGHT_GT_PFM, bake_equirect(scene.light, *cfg.light_map_size))
    write_json(out / IDS.MATERIAL_GT, scene.to_dict())

    mesh = meshing.marching_cubes(scene.sdf, cfg.mesh_bound, cfg.mesh_resolution, threads)
    if not mesh.empty:
        meshing.export_mesh(meshing.bake_attributes(mesh, scene, scene), out / IDS.MESH_GT_PLY, "ply")

    logger.info("wrote %d views of '%s' at %dx%d to %s", n_views, scene.name, resolution[0], resolution[1], out)
    return out
