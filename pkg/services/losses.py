"""
Training objectives, built as graph nodes so they backpropagate into the fields.

Ray-averaged terms (photometric, mask) take an optional `count` so that a
batch split across several graphs still sums to the full-batch mean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from services.autodiff import DiffGraph
from services.shading import fibonacci_sphere
from utils.ids import IDS

logger = logging.getLogger("losses")

# ---- SETTINGS ----
BCE_CLAMP = 1e-5
SMOOTHNESS_STEP = 0.01
NEAR_SURFACE_SIGMA = 0.05
MIN_LIGHT_DIRECTIONS = 16


@dataclass
class LossWeights:
    l1: float = 1.0
    eikonal: float = 0.1
    mask: float = 0.5
    mat: float = 0.01
    metal: float = 0.01
    light_int: float = 0.001
    light_smooth: float = 0.01
    lpips: float = 0.0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if value < 0:
                raise ValueError(f"loss weight '{f.name}' must be >= 0, got {value}")
        if self.lpips != 0:
            raise ValueError("loss weight 'lpips' must be 0: the perceptual term needs a pretrained "
                             "network and is out of scope (L1 only; SSIM is available for evaluation)")

    def weight(self, term: str) -> float:
        return float(getattr(self, term))

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{f.name: getattr(self, f.name) * factor for f in fields(self)})


@dataclass
class LossBreakdown:
    terms: Dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def recompute(self, weights: LossWeights) -> float:
        return float(sum(weights.weight(name) * value for name, value in self.terms.items()))

    def as_row(self) -> Dict[str, float]:
        row = {name: float(self.terms.get(name, 0.0)) for name in IDS.TERMS}
        row[IDS.COL_TOTAL] = float(self.total)
        return row

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total) and all(np.isfinite(v) for v in self.terms.values()))


# ---------- Terms ----------

def photometric_loss(graph: DiffGraph, pred: int, gt: np.ndarray, count: Optional[int] = None) -> int:
    """Mean |pred - gt| over rays and channels (divided by 3 * count when given)."""
    gt = np.asarray(gt, dtype=np.float64)
    if graph.shape(pred) != gt.shape:
        raise ValueError(f"photometric_loss: prediction {graph.shape(pred)} vs ground truth {gt.shape}")
    diff = graph.abs(graph.sub(pred, graph.constant(gt)))
    if count is None:
        return graph.mean(diff)
    return graph.affine(graph.sum(diff), scale=1.0 / (3.0 * count))


def eikonal_loss(graph: DiffGraph, grad_norms: int) -> int:
    """Mean of (|grad f| - 1)^2."""
    return graph.mean(graph.square(graph.affine(grad_norms, shift=-1.0)))


def mask_loss(graph: DiffGraph, opacity: int, masks: np.ndarray, count: Optional[int] = None) -> int:
    """Binary cross-entropy of accumulated opacity against the 0/1 mask; opacity clamped to [1e-5, 1 - 1e-5]."""
    masks = np.asarray(masks, dtype=np.float64)
    o = graph.clamp(opacity, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = graph.mul(graph.constant(masks), graph.log(o))
    outside = graph.mul(graph.constant(1.0 - masks), graph.log(graph.affine(o, scale=-1.0, shift=1.0)))
    per_ray = graph.affine(graph.add(inside, outside), scale=-1.0)
    if count is None:
        return graph.mean(per_ray)
    return graph.affine(graph.sum(per_ray), scale=1.0 / count)


def tangent_perturbations(normals: Optional[np.ndarray], n: int, rng: np.random.Generator,
                          step: float = SMOOTHNESS_STEP) -> np.ndarray:
    """Random offsets of length `step`, orthogonal to `normals` when given."""
    v = rng.normal(size=(n, 3))
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64)
        v -= np.einsum("ij,ij->i", v, normals)[:, None] * normals
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    return step * v / np.maximum(norm, 1e-12)


def material_smoothness_loss(graph: DiffGraph, points: np.ndarray, material,
                             offsets: np.ndarray) -> Tuple[int, Dict[str, int]]:
    """
    Mean over points of |albedo(x) - albedo(x + eps)|_1 + |r(x) - r(x + eps)|.
    Returns (loss node, material nodes at the unperturbed points).
    """
    points = np.asarray(points, dtype=np.float64)
    p = len(points)
    nodes = material.material_nodes(graph, np.concatenate([points, points + offsets]))
    base, moved = np.arange(p), np.arange(p, 2 * p)

    def pick(name: str, rows: np.ndarray) -> int:
        return graph.gather_rows(nodes[name], rows)

    albedo_diff = graph.sum(graph.abs(graph.sub(pick("albedo", base), pick("albedo", moved))), axis=1)
    rough_diff = graph.abs(graph.sub(pick("roughness", base), pick("roughness", moved)))
    loss = graph.mean(graph.add(albedo_diff, rough_diff))
    here = {name: pick(name, base) for name in ("albedo", "roughness", "metallic")}
    return loss, here


def metallic_sparsity_loss(graph: DiffGraph, metallic: int) -> int:
    """Mean of m (1 - m)."""
    return graph.mean(graph.mul(metallic, graph.affine(metallic, scale=-1.0, shift=1.0)))


def light_regularization(graph: DiffGraph, light, k: int = 64) -> Tuple[int, int]:
    """
    (intensity, smoothness) over K Fibonacci sphere directions.
    - intensity: mean radiance
    - smoothness: mean |L(w) - L(w')|_1 over each direction and its nearest neighbour
    """
    if k < MIN_LIGHT_DIRECTIONS:
        raise ValueError(f"light regularization needs >= {MIN_LIGHT_DIRECTIONS} directions, got {k}")
    dirs = fibonacci_sphere(k)
    _, nn = cKDTree(dirs).query(dirs, k=2)
    radiance = light.radiance_node(graph, graph.constant(dirs))
    intensity = graph.mean(radiance)
    diff = graph.sub(graph.gather_rows(radiance, nn[:, 0]), graph.gather_rows(radiance, nn[:, 1]))
    smooth = graph.mean(graph.sum(graph.abs(diff), axis=1))
    return intensity, smooth


def eikonal_points(surface_points: np.ndarray, n: int, bound: float, rng: np.random.Generator) -> np.ndarray:
    """Half near the surface (points + N(0, 0.05^2) noise), half uniform in [-bound, bound]^3."""
    n_near = n // 2 if len(surface_points) else 0
    uniform = rng.uniform(-bound, bound, size=(n - n_near, 3))
    if n_near == 0:
        return uniform
    picks = surface_points[rng.integers(0, len(surface_points), size=n_near)]
    near = picks + rng.normal(0.0, NEAR_SURFACE_SIGMA, size=(n_near, 3))
    return np.concatenate([near, uniform])


# ---------- Combination ----------

def total_loss(graph: DiffGraph, terms: Dict[str, int], weights: LossWeights) -> Tuple[int, LossBreakdown]:
    """
    Weighted sum of the term nodes present in `terms`.
    The breakdown holds the unweighted term values and the total.
    """
    unknown = sorted(set(terms) - set(IDS.TERMS))
    if unknown:
        raise ValueError(f"total_loss: unknown term(s) {', '.join(unknown)}")
    total = None
    values: Dict[str, float] = {}
    for name in IDS.TERMS:
        if name not in terms:
            continue
        values[name] = float(graph.value(terms[name]).reshape(()))
        weighted = graph.affine(terms[name], scale=weights.weight(name))
        total = weighted if total is None else graph.add(total, weighted)
    if total is None:
        total = graph.constant(0.0)
    return total, LossBreakdown(terms=values, total=float(graph.value(total).reshape(())))


def merge_breakdowns(parts, weights: LossWeights) -> LossBreakdown:
    """Sum partial breakdowns (terms split across graphs) into one."""
    terms: Dict[str, float] = {}
    for part in parts:
        for name, value in part.terms.items():
            terms[name] = terms.get(name, 0.0) + value
    merged = LossBreakdown(terms=terms)
    merged.total = merged.recompute(weights)
    return merged
