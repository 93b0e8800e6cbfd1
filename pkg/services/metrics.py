"""
Evaluation metrics and the end-to-end evaluation pipeline.

Geometry: Chamfer distance and normal consistency between sampled mesh surfaces.
Images: PSNR (capped) and SSIM (11x11 Gaussian window, sigma 1.5).
Materials: per-attribute PSNR at ground-truth surface points.
Relighting: surface-mode renders of the trained geometry + material under novel lights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import trimesh
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from services import meshing
from services.cameras import Camera, SceneDataset, orbit_cameras
from services.oracle import OracleRenderConfig, TrainedScene, forward_render
from services.scenes import AnalyticScene, EditedMaterial, named_light
from services.transforms import report_table
from utils.helpers import dataclass_from_dict, dataclass_to_dict
from utils.ids import IDS
from utils.jsonloaders import load_json

logger = logging.getLogger("eval")

# ---- SETTINGS ----
PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
MIN_MESH_SAMPLES = 1000
SSIM_SIGMA = 1.5
GRAY_ALBEDO = (0.5, 0.5, 0.5)
EVERYWHERE = 1e9


# ---- CONFIG ----
@dataclass
class EvalConfig:
    n_samples: int = 100_000
    n_eval_views: int = 4
    eval_seed: int = 1234
    novel_lights: Tuple[str, ...] = ("studio", "sunset")
    material_points: int = 20_000
    quadrature_k: int = 64
    mesh_resolution: int = 64
    mesh_bound: float = 1.0
    chamfer_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < MIN_MESH_SAMPLES:
            raise ValueError(f"n_samples must be >= {MIN_MESH_SAMPLES}, got {self.n_samples}")
        if self.n_eval_views < 1 or self.material_points < 1:
            raise ValueError("n_eval_views and material_points must be >= 1")
        self.novel_lights = tuple(self.novel_lights)
        for name in self.novel_lights:
            named_light(name)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "EvalConfig":
        return dataclass_from_dict(cls, data, "eval")


# ---- DOMAIN TYPES ----
@dataclass
class EvalReport:
    chamfer: Optional[float] = None
    normal_consistency: Optional[float] = None
    nvs_psnr: List[float] = field(default_factory=list)
    nvs_ssim: List[float] = field(default_factory=list)
    material_psnr: Optional[Dict[str, float]] = None
    relight_psnr: Optional[Dict[str, float]] = None
    relight_baseline_psnr: Optional[Dict[str, float]] = None
    checkpoint: str = ""
    iteration: int = 0

    def to_dict(self) -> dict:
        return dataclass_to_dict(self)

    def table(self) -> pd.DataFrame:
        body = {k: v for k, v in self.to_dict().items() if k not in ("checkpoint", "iteration")}
        return report_table(body)


# ---------- Geometry ----------

def _check_mesh(mesh, name: str) -> trimesh.Trimesh:
    if mesh is None or getattr(mesh, "empty", False) or len(mesh.faces) == 0:
        raise ValueError(f"{name} is empty; geometry metrics need triangles")
    return mesh.to_trimesh() if hasattr(mesh, "to_trimesh") else mesh


def sample_mesh(mesh, n_samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples and the face normal at each."""
    tm = _check_mesh(mesh, "mesh")
    if n_samples < MIN_MESH_SAMPLES:
        raise ValueError(f"n_samples must be >= {MIN_MESH_SAMPLES}, got {n_samples}")
    points, face_index = trimesh.sample.sample_surface(tm, n_samples, seed=seed)
    return np.asarray(points, dtype=np.float64), np.asarray(tm.face_normals[face_index], dtype=np.float64)


def _paired_samples(mesh_a, mesh_b, n_samples: int, seed: int, seed_b: Optional[int]):
    _check_mesh(mesh_a, "first mesh")
    _check_mesh(mesh_b, "second mesh")
    seed_b = seed + 1 if seed_b is None else seed_b
    return sample_mesh(mesh_a, n_samples, seed), sample_mesh(mesh_b, n_samples, seed_b)


def chamfer_distance(mesh_a, mesh_b, n_samples: int = 100_000, seed: int = 0,
                     seed_b: Optional[int] = None) -> float:
    """
    Symmetric mean nearest-neighbour distance between surface samples.
    A is sampled with `seed`, B with `seed_b` (default seed + 1); swapping the
    meshes together with the seeds gives the same value.
    """
    (pa, _), (pb, _) = _paired_samples(mesh_a, mesh_b, n_samples, seed, seed_b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def normal_consistency(mesh_a, mesh_b, n_samples: int = 100_000, seed: int = 0,
                       seed_b: Optional[int] = None) -> float:
    """Symmetric mean angle (degrees) between each sample's normal and the normal at its nearest sample on the other mesh."""
    (pa, na), (pb, nb) = _paired_samples(mesh_a, mesh_b, n_samples, seed, seed_b)
    _, ia = cKDTree(pb).query(pa)
    _, ib = cKDTree(pa).query(pb)

    def angles(n_src: np.ndarray, n_dst: np.ndarray) -> np.ndarray:
        cos = np.clip(np.einsum("ij,ij->i", n_src, n_dst), -1.0, 1.0)
        return np.degrees(np.arccos(cos))

    return float(0.5 * (angles(na, nb[ia]).mean() + angles(nb, na[ib]).mean()))


# ---------- Images ----------

def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 100 dB (MSE < 1e-10 gives the cap)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def ssim(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    return float(structural_similarity(
        a, b,
        data_range=peak,
        channel_axis=-1 if a.ndim == 3 else None,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
    ))


# ---------- Materials ----------

def surface_points(recipe, n_points: int, seed: int, mesh=None) -> np.ndarray:
    """
    Points on the ground-truth surface: samples of `mesh` (or of a fresh
    extraction) projected onto the recipe's zero level set with one Newton step.
    """
    if mesh is None or getattr(mesh, "empty", False):
        mesh = meshing.marching_cubes(recipe.sdf, 1.0, 128)
    tm = _check_mesh(mesh, "ground-truth mesh")
    points, _ = trimesh.sample.sample_surface(tm, n_points, seed=seed)
    points = np.asarray(points, dtype=np.float64)
    sdf, grad = recipe.sdf_and_gradient(points)
    norm2 = np.maximum(np.einsum("ij,ij->i", grad, grad), 1e-12)
    return points - (sdf / norm2)[:, None] * grad


def material_map_error(material, recipe, mesh=None, n_points: int = 20_000, seed: int = 0) -> Dict[str, float]:
    """PSNR per attribute (albedo over RGB, roughness, metallic) of `material` against the recipe."""
    points = surface_points(recipe, n_points, seed, mesh)
    pred = material.material(points)
    truth = recipe.material(points)
    return {
        "albedo": psnr(pred.albedo, truth.albedo),
        "roughness": psnr(pred.roughness, truth.roughness),
        "metallic": psnr(pred.metallic, truth.metallic),
    }


# ---------- Relighting ----------

def gray_albedo(material) -> EditedMaterial:
    """`material` with albedo forced to 0.5 everywhere (roughness/metallic kept)."""
    return EditedMaterial(material, GRAY_ALBEDO, (-EVERYWHERE,) * 3, (EVERYWHERE,) * 3)


def relighting_eval(trained: TrainedScene, light, recipe: AnalyticScene, cameras: List[Camera],
                    cfg: Optional[OracleRenderConfig] = None, k: Optional[int] = None,
                    threads: int = 1) -> float:
    """
    Mean PSNR over `cameras` between the reconstruction under `light` (its own
    light field bypassed) and the true scene under the same light.
    """
    if not cameras:
        raise ValueError("relighting_eval needs at least one camera")
    scores = []
    for camera in cameras:
        truth, _, _ = forward_render(recipe, camera, cfg, light=light, k=k, threads=threads)
        pred, _, _ = forward_render(trained, camera, cfg, light=light, k=k, threads=threads)
        scores.append(psnr(np.clip(pred, 0.0, 1.0), np.clip(truth, 0.0, 1.0)))
    return float(np.mean(scores))


# ---- MAIN FUNCTION ----

def evaluate(
    trained: TrainedScene,
    ds: SceneDataset,
    data_dir: Union[str, Path],
    cfg: Optional[EvalConfig] = None,
    oracle_cfg: Optional[OracleRenderConfig] = None,
    threads: int = 1,
) -> EvalReport:
    """
    Full metric suite for one trained model.
    1. Geometry: marching cubes of the trained SDF vs mesh_gt.ply (skipped when absent)
    2. Novel views: oracle renders at `n_eval_views` unseen cameras when material_gt.json exists,
       otherwise the first dataset views against their images
    3. Materials + relighting: only with material_gt.json
    """
    cfg = cfg or EvalConfig()
    root = Path(data_dir)
    oracle_cfg = oracle_cfg or OracleRenderConfig()
    oracle_cfg = replace(oracle_cfg, t_near=ds.t_near, t_far=ds.t_far)
    report = EvalReport()

    recipe = None
    recipe_file = root / IDS.MATERIAL_GT
    if recipe_file.is_file():
        recipe = AnalyticScene.from_dict(load_json(recipe_file))
    else:
        logger.warning("%s not found: material and relighting metrics skipped", recipe_file.name)

    gt_mesh = None
    mesh_file = root / IDS.MESH_GT_PLY
    if mesh_file.is_file():
        gt_mesh = meshing.read_ply(mesh_file)
    elif recipe is not None:
        gt_mesh = meshing.marching_cubes(recipe.sdf, oracle_cfg.mesh_bound, oracle_cfg.mesh_resolution, threads)

    # 1. geometry
    if gt_mesh is not None and not gt_mesh.empty:
        mesh = meshing.marching_cubes(trained.sdf, cfg.mesh_bound, cfg.mesh_resolution, threads)
        if mesh.empty:
            logger.warning("trained SDF has no zero crossing; geometry metrics left empty")
        else:
            report.chamfer = chamfer_distance(mesh, gt_mesh, cfg.n_samples, cfg.chamfer_seed)
            report.normal_consistency = normal_consistency(mesh, gt_mesh, cfg.n_samples, cfg.chamfer_seed)
            logger.info("chamfer %.5f, normal consistency %.2f deg", report.chamfer, report.normal_consistency)

    # 2. novel views
    if recipe is not None:
        cameras = orbit_cameras(cfg.n_eval_views, oracle_cfg.camera_radius, ds.resolution, oracle_cfg.fov_degrees,
                                cfg.eval_seed, oracle_cfg.camera_jitter)
        pairs = [(forward_render(trained, cam, oracle_cfg, k=cfg.quadrature_k, threads=threads)[0],
                  forward_render(recipe, cam, oracle_cfg, k=cfg.quadrature_k, threads=threads)[0])
                 for cam in cameras]
    else:
        cameras = [v.camera for v in ds.views[:cfg.n_eval_views]]
        pairs = [(forward_render(trained, v.camera, oracle_cfg, k=cfg.quadrature_k, threads=threads)[0], v.image)
                 for v in ds.views[:cfg.n_eval_views]]
    for pred, truth in pairs:
        pred, truth = np.clip(pred, 0.0, 1.0), np.clip(truth, 0.0, 1.0)
        report.nvs_psnr.append(psnr(pred, truth))
        report.nvs_ssim.append(ssim(pred, truth))
    logger.info("novel views: PSNR %.2f dB, SSIM %.4f", np.mean(report.nvs_psnr), np.mean(report.nvs_ssim))

    # 3. materials and relighting
    if recipe is not None:
        report.material_psnr = material_map_error(trained.material_src, recipe, gt_mesh, cfg.material_points,
                                                  cfg.eval_seed)
        baseline = TrainedScene(trained.geometry, gray_albedo(trained.material_src), trained.light)
        report.relight_psnr, report.relight_baseline_psnr = {}, {}
        for name in cfg.novel_lights:
            light = named_light(name)
            report.relight_psnr[name] = relighting_eval(trained, light, recipe, cameras, oracle_cfg,
                                                        cfg.quadrature_k, threads)
            report.relight_baseline_psnr[name] = relighting_eval(baseline, light, recipe, cameras, oracle_cfg,
                                                                 cfg.quadrature_k, threads)
            logger.info("relight '%s': %.2f dB (gray-albedo baseline %.2f dB)", name,
                        report.relight_psnr[name], report.relight_baseline_psnr[name])
    return report
