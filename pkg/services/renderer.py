"""
SDF volume rendering.

    sigma = kappa * sigmoid(-kappa * s)          density from signed distance
    alpha_j = 1 - exp(-sigma_j * delta_j)
    T_j = exp(-sum_{k<j} sigma_k * delta_k)       transmittance
    w_j = T_j * alpha_j                           compositing weight
    C(r) = sum_j w_j * c_j                        background is black

Shading runs only at samples whose weight reaches the cutoff; every other
sample contributes exactly zero. Samples with a degenerate SDF gradient or a
back-facing normal also contribute zero and are flagged.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import expit

from services.autodiff import DiffGraph
from services.cameras import Camera, RayBundle, camera_bundle

logger = logging.getLogger("render")

# ---- SETTINGS ----
SHADING_CUTOFF = 1e-3
HIT_OPACITY = 0.5
NORMAL_EPS = 1e-9
RENDER_CHUNK = 1024

# shading_fn(graph, points (M, 3), normals node (M, 3), view_dirs (M, 3)) -> color node (M, 3)
ShadingFn = Callable[[DiffGraph, np.ndarray, int, np.ndarray], int]


# ---- DOMAIN TYPES ----
@dataclass
class RenderNodes:
    """Graph-side result of `render_rays` plus the numpy bookkeeping."""
    color: int                    # node (N, 3)
    opacity: int                  # node (N,)
    weights: np.ndarray           # (N, S)
    transmittance: np.ndarray     # (N, S)
    depth: np.ndarray             # (N,) depth of the argmax-weight sample
    surface_points: np.ndarray    # (N, 3) o + depth * d
    hit: np.ndarray               # (N,) opacity > 0.5
    flagged: np.ndarray           # (N,) a sample above the cutoff was skipped
    shaded_samples: int
    skipped_invalid: int
    skipped_backfacing: int


@dataclass
class RayRenderResult:
    color: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    surface_point: np.ndarray
    depth: np.ndarray
    hit: np.ndarray
    flagged: np.ndarray


# ---------- Density & weights (numpy) ----------

def sdf_to_density(s, kappa: float) -> np.ndarray:
    """sigma = kappa * sigmoid(-kappa * s); non-increasing in s, in (0, kappa)."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return kappa * expit(-kappa * np.asarray(s, dtype=np.float64))


def compute_weights(densities: np.ndarray, deltas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Compositing weights and transmittance along the last axis."""
    densities = np.asarray(densities, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(densities < 0):
        raise ValueError("densities must be non-negative")
    if np.any(deltas <= 0):
        raise ValueError("deltas must be positive")
    optical = densities * deltas
    transmittance = np.exp(-(np.cumsum(optical, axis=-1) - optical))
    alpha = -np.expm1(-optical)
    return transmittance * alpha, transmittance


def weight_entropy(weights: np.ndarray) -> float:
    """Entropy of the normalized weight distribution of one ray."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return 0.0
    p = w[w > 0] / total
    return float(-(p * np.log(p)).sum())


# ---------- Density & weights (graph) ----------

def density_nodes(graph: DiffGraph, sdf: int, kappa: int) -> int:
    ks = graph.scale(sdf, kappa)
    return graph.scale(graph.sigmoid(graph.affine(ks, scale=-1.0)), kappa)


def weight_nodes(graph: DiffGraph, sigma: int, deltas: np.ndarray) -> Tuple[int, int]:
    """(weights, transmittance) nodes, both (N, S)."""
    optical = graph.mul(sigma, graph.constant(deltas))
    trans = graph.exp(graph.affine(graph.cumsum(optical, exclusive=True), scale=-1.0))
    alpha = graph.affine(graph.exp(graph.affine(optical, scale=-1.0)), scale=-1.0, shift=1.0)
    return graph.mul(trans, alpha), trans


# ---------- Rendering ----------

def render_rays(
    graph: DiffGraph,
    bundle: RayBundle,
    geometry,
    shading_fn: ShadingFn,
    kappa: int,
    cutoff: float = SHADING_CUTOFF,
) -> RenderNodes:
    """
    Composite shaded colors along every ray of `bundle`.
    - geometry: any source with `sdf_nodes(graph, points, with_gradient)`
    - kappa: node holding the (positive) density sharpness
    """
    n, samples = bundle.num_rays, bundle.num_samples
    flat_points = bundle.points.reshape(-1, 3)

    sdf, _ = geometry.sdf_nodes(graph, flat_points, False)
    sigma = graph.reshape(density_nodes(graph, sdf, kappa), (n, samples))
    weights, trans = weight_nodes(graph, sigma, bundle.deltas)
    opacity = graph.sum(weights, axis=1)

    w_val = graph.value(weights)
    t_val = graph.value(trans)

    # shading candidates
    candidates = np.flatnonzero(w_val.reshape(-1) >= cutoff)
    ray_of = candidates // samples
    view_dirs = -bundle.directions[ray_of]

    skipped_invalid = skipped_back = 0
    flagged = np.zeros(n, dtype=bool)
    color = None
    if candidates.size:
        _, grad = geometry.sdf_nodes(graph, flat_points[candidates], True)
        grad_norm = graph.norm(grad)
        normals = graph.div(grad, graph.tile_last(graph.maximum(grad_norm, 1e-12), 3))

        g_norm = graph.value(grad_norm)
        facing = np.einsum("ij,ij->i", graph.value(normals), view_dirs)
        invalid = g_norm <= NORMAL_EPS
        back = ~invalid & (facing <= 0.0)
        keep = np.flatnonzero(~invalid & ~back)
        skipped_invalid, skipped_back = int(invalid.sum()), int(back.sum())
        flagged[ray_of[invalid | back]] = True

        if keep.size:
            shaded = shading_fn(graph, flat_points[candidates[keep]], graph.gather_rows(normals, keep),
                                view_dirs[keep])
            w_keep = graph.gather_rows(graph.reshape(weights, (n * samples,)), candidates[keep])
            contrib = graph.mul(shaded, graph.tile_last(w_keep, 3))
            color = graph.segment_sum(contrib, ray_of[keep], n)

    if color is None:
        color = graph.constant(np.zeros((n, 3)))

    best = np.argmax(w_val, axis=1)
    depth = bundle.t[np.arange(n), best]
    o_val = graph.value(opacity)

    if skipped_invalid or skipped_back:
        logger.debug("render_rays: skipped %d invalid-normal and %d back-facing samples",
                     skipped_invalid, skipped_back)

    return RenderNodes(
        color=color,
        opacity=opacity,
        weights=w_val,
        transmittance=t_val,
        depth=depth,
        surface_points=bundle.origins + depth[:, None] * bundle.directions,
        hit=o_val > HIT_OPACITY,
        flagged=flagged,
        shaded_samples=int(candidates.size - skipped_invalid - skipped_back),
        skipped_invalid=skipped_invalid,
        skipped_backfacing=skipped_back,
    )


def render_bundle(bundle: RayBundle, bind_sources, kappa: float,
                  cutoff: float = SHADING_CUTOFF) -> RayRenderResult:
    """
    Numpy rendering of a bundle on a throwaway graph.
    `bind_sources(graph)` returns (geometry, shading_fn) attached to that graph.
    """
    graph = DiffGraph()
    geometry, shading_fn = bind_sources(graph)
    kappa_node = graph.constant(np.array([kappa]))
    out = render_rays(graph, bundle, geometry, shading_fn, kappa_node, cutoff)
    return RayRenderResult(
        color=graph.value(out.color).copy(),
        opacity=graph.value(out.opacity).copy(),
        weights=out.weights,
        transmittance=out.transmittance,
        surface_point=out.surface_points,
        depth=out.depth,
        hit=out.hit,
        flagged=out.flagged,
    )


def render_ray(bundle: RayBundle, bind_sources, kappa: float, cutoff: float = SHADING_CUTOFF) -> RayRenderResult:
    """Single-ray form: `bundle` must hold exactly one ray."""
    if bundle.num_rays != 1:
        raise ValueError(f"render_ray expects one ray, got {bundle.num_rays}")
    if bundle.num_samples < 2:
        raise ValueError("render_ray needs at least 2 samples")
    return render_bundle(bundle, bind_sources, kappa, cutoff)


def surface_point(result: RayRenderResult, bundle: RayBundle, geometry) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    (x_s, n, hit) per ray from the argmax-weight sample.
    Rows without a hit hold NaN; the normal comes from the geometry at x_s.
    """
    hit = np.asarray(result.hit, dtype=bool)
    points = np.full((bundle.num_rays, 3), np.nan)
    normals = np.full((bundle.num_rays, 3), np.nan)
    if hit.any():
        x = bundle.origins[hit] + result.depth[hit, None] * bundle.directions[hit]
        _, grad = geometry.sdf_and_gradient(x)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        points[hit] = x
        normals[hit] = grad / np.maximum(norm, 1e-12)
    return points, normals, hit


def render_view(
    camera: Camera,
    t_near: float,
    t_far: float,
    samples: int,
    bind_sources,
    kappa: float,
    cutoff: float = SHADING_CUTOFF,
    chunk: int = RENDER_CHUNK,
    threads: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Volume-render a full image; returns (H, W, 3) color and (H, W) opacity."""
    width, height = camera.resolution
    total = width * height
    starts = list(range(0, total, chunk))

    def run(start: int) -> RayRenderResult:
        rows = np.arange(start, min(start + chunk, total))
        return render_bundle(camera_bundle(camera, t_near, t_far, samples, rows), bind_sources, kappa, cutoff)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(s) for s in starts]

    color = np.concatenate([r.color for r in results]).reshape(height, width, 3)
    opacity = np.concatenate([r.opacity for r in results]).reshape(height, width)
    return color, opacity
