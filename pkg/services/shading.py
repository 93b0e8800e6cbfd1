"""
Cook-Torrance shading with a deterministic hemisphere quadrature.

    f_r = k_d * albedo / pi + D * F * G / (4 (n.wo) (n.wi))
    D: GGX with alpha_g = r^2
    F: Schlick, F0 = 0.04 (1 - m) + albedo * m, evaluated with h.wo
    G: Smith separable Schlick-GGX, k = (r + 1)^2 / 8
    k_d = (1 - mean(F)) (1 - m)

    W   = sum_k (2 pi / K) f_r|albedo=1 (dir_k, wo) (n.dir_k)
    L_o = sum_k (2 pi / K) f_r(dir_k, wo) L_i(dir_k) (n.dir_k) / max(1, W)

Dividing by max(1, W) keeps a narrow GGX lobe that lands on a quadrature node
from reflecting more than the incoming light.

Quadrature directions are Fibonacci-spiral points on the hemisphere around n,
placed with a branchless orthonormal basis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from services.autodiff import DiffGraph
from services.fields import PBRSample

# ---- SETTINGS ----
GRAZING_FLOOR = 1e-4
DIELECTRIC_F0 = 0.04
DEFAULT_K = 64
MIN_K = 8

# brdf(graph, albedo (P,3), roughness (P,), metallic (P,), n, wi, wo (P,3)) -> (P,3)
BrdfFn = Callable[[DiffGraph, int, int, int, int, int, int], int]


@dataclass
class HemisphereQuadrature:
    directions: np.ndarray  # (K, 3) world space
    weights: np.ndarray     # (K,)


# ---------- Quadrature ----------

def fibonacci_hemisphere(k: int) -> np.ndarray:
    """K local directions (z up); z_i = 1 - (i + 0.5) / K."""
    if k < MIN_K:
        raise ValueError(f"quadrature needs K >= {MIN_K}, got {k}")
    i = np.arange(k, dtype=np.float64)
    z = 1.0 - (i + 0.5) / k
    ring = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), z], axis=1)


def fibonacci_sphere(k: int) -> np.ndarray:
    """K directions covering the full sphere."""
    i = np.arange(k, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / k
    ring = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), z], axis=1)


def tangent_frame(n: np.ndarray):
    """Branchless orthonormal basis (t1, t2) for unit normals n (..., 3)."""
    n = np.asarray(n, dtype=np.float64)
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(nz >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    t1 = np.stack([1.0 + sign * nx * nx * a, sign * b, -sign * nx], axis=-1)
    t2 = np.stack([b, sign + ny * ny * a, -ny], axis=-1)
    return t1, t2


def build_quadrature(n: np.ndarray, k: int = DEFAULT_K) -> HemisphereQuadrature:
    """Fibonacci hemisphere around one unit normal with equal 2 pi / K weights."""
    n = np.asarray(n, dtype=np.float64).reshape(3)
    local = fibonacci_hemisphere(k)
    t1, t2 = tangent_frame(n)
    dirs = local[:, :1] * t1 + local[:, 1:2] * t2 + local[:, 2:] * n
    return HemisphereQuadrature(directions=dirs, weights=np.full(k, 2.0 * math.pi / k))


def _frame_nodes(graph: DiffGraph, normals: int):
    """Graph twin of `tangent_frame`; the sign branch is held constant."""
    m = graph.shape(normals)[0]
    nx, ny, nz = (graph.reshape(graph.slice(normals, i, i + 1), (m,)) for i in range(3))
    sign = graph.constant(np.where(graph.value(nz) >= 0.0, 1.0, -1.0))
    a = graph.div(graph.constant(-np.ones(m)), graph.add(sign, nz))
    b = graph.mul(graph.mul(nx, ny), a)
    sx = graph.mul(sign, nx)

    def col(x: int) -> int:
        return graph.reshape(x, (m, 1))

    t1 = graph.concat([
        col(graph.affine(graph.mul(graph.mul(sx, nx), a), shift=1.0)),
        col(graph.mul(sign, b)),
        col(graph.affine(sx, scale=-1.0)),
    ])
    t2 = graph.concat([
        col(b),
        col(graph.add(sign, graph.mul(graph.square(ny), a))),
        col(graph.affine(ny, scale=-1.0)),
    ])
    return t1, t2


# ---------- BRDF ----------

def cook_torrance_nodes(graph: DiffGraph, albedo: int, roughness: int, metallic: int,
                        n: int, wi: int, wo: int) -> int:
    h_sum = graph.add(wi, wo)
    h = graph.div(h_sum, graph.tile_last(graph.maximum(graph.norm(h_sum), 1e-12), 3))

    n_h = graph.maximum(graph.dot(n, h), 0.0)
    h_o = graph.clamp(graph.dot(h, wo), 0.0, 1.0)
    n_o = graph.maximum(graph.dot(n, wo), GRAZING_FLOOR)
    n_i = graph.maximum(graph.dot(n, wi), GRAZING_FLOOR)

    # D
    a2 = graph.square(graph.square(roughness))
    denom = graph.affine(graph.mul(graph.square(n_h), graph.affine(a2, shift=-1.0)), shift=1.0)
    d = graph.div(a2, graph.affine(graph.square(denom), scale=math.pi))

    # F
    m3 = graph.tile_last(metallic, 3)
    f0 = graph.add(graph.mul(albedo, m3), graph.affine(m3, scale=-DIELECTRIC_F0, shift=DIELECTRIC_F0))
    one_minus = graph.affine(h_o, scale=-1.0, shift=1.0)
    pow5 = graph.mul(graph.square(graph.square(one_minus)), one_minus)
    f = graph.add(f0, graph.mul(graph.affine(f0, scale=-1.0, shift=1.0), graph.tile_last(pow5, 3)))

    # G
    k = graph.affine(graph.square(graph.affine(roughness, shift=1.0)), scale=0.125)
    one_minus_k = graph.affine(k, scale=-1.0, shift=1.0)

    def g1(x: int) -> int:
        return graph.div(x, graph.add(graph.mul(x, one_minus_k), k))

    g = graph.mul(g1(n_o), g1(n_i))

    dg = graph.div(graph.mul(d, g), graph.affine(graph.mul(n_o, n_i), scale=4.0))

    k_d = graph.mul(graph.affine(graph.mean(f, axis=1), scale=-1.0, shift=1.0),
                    graph.affine(metallic, scale=-1.0, shift=1.0))
    diffuse = graph.mul(graph.affine(albedo, scale=1.0 / math.pi), graph.tile_last(k_d, 3))
    specular = graph.mul(f, graph.tile_last(dg, 3))
    return graph.add(diffuse, specular)


def lambertian_nodes(graph: DiffGraph, albedo: int, roughness: int, metallic: int,
                     n: int, wi: int, wo: int) -> int:
    """f_r = albedo / pi; for closed-form checks."""
    return graph.affine(albedo, scale=1.0 / math.pi)


def brdf_eval(mat: PBRSample, n, wi, wo, brdf: Optional[BrdfFn] = None) -> np.ndarray:
    """
    Numpy BRDF for P configurations (inputs (P, 3) or (3,) unit vectors).
    Grazing cosines are floored at 1e-4 in the denominator.
    """
    brdf = brdf or cook_torrance_nodes
    n, wi, wo = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (n, wi, wo))
    graph = DiffGraph()
    ids = [graph.constant(a) for a in (mat.albedo, mat.roughness, mat.metallic, n, wi, wo)]
    return graph.value(brdf(graph, *ids)).copy()


# ---------- Shading ----------

def white_albedo_nodes(graph: DiffGraph, brdf: BrdfFn, args, cos_i: int, m: int, k: int) -> int:
    """Directional albedo (M,) of `brdf` with albedo set to 1, on the same K directions."""
    albedo, roughness, metallic, n, wi, wo = args
    white = graph.constant(np.ones(graph.shape(albedo)))
    f_white = graph.mean(brdf(graph, white, roughness, metallic, n, wi, wo), axis=1)
    per_point = graph.sum(graph.reshape(graph.mul(f_white, cos_i), (m, k)), axis=1)
    return graph.affine(per_point, scale=2.0 * math.pi / k)


def shade_nodes(
    graph: DiffGraph,
    normals: int,
    view_dirs: np.ndarray,
    material: Dict[str, int],
    light,
    k: int = DEFAULT_K,
    brdf: Optional[BrdfFn] = None,
) -> int:
    """
    Outgoing radiance (M, 3) at M front-facing points.
    - material: {"albedo", "roughness", "metallic"} nodes for the M points
    - light: any source with `radiance_node(graph, dirs)`
    - the BRDF is divided by max(1, W), W being its quadrature albedo at white albedo,
      so a white constant light never reflects more than it sends
    """
    brdf = brdf or cook_torrance_nodes
    m = graph.shape(normals)[0]
    local = fibonacci_hemisphere(k)
    rows = np.repeat(np.arange(m), k)

    t1, t2 = _frame_nodes(graph, normals)
    coef = [graph.constant(np.repeat(np.tile(local[:, c], m)[:, None], 3, axis=1)) for c in range(3)]
    n_rep = graph.gather_rows(normals, rows)
    dirs = graph.add(graph.add(graph.mul(graph.gather_rows(t1, rows), coef[0]),
                               graph.mul(graph.gather_rows(t2, rows), coef[1])),
                     graph.mul(n_rep, coef[2]))

    wo = graph.constant(np.repeat(np.asarray(view_dirs, dtype=np.float64), k, axis=0))
    args = (graph.gather_rows(material["albedo"], rows),
            graph.gather_rows(material["roughness"], rows),
            graph.gather_rows(material["metallic"], rows),
            n_rep, dirs, wo)
    cos_i = graph.maximum(graph.dot(n_rep, dirs), 0.0)
    f_r = brdf(graph, *args)
    energy = white_albedo_nodes(graph, brdf, args, cos_i, m, k)
    f_r = graph.div(f_r, graph.tile_last(graph.gather_rows(graph.maximum(energy, 1.0), rows), 3))

    radiance = light.radiance_node(graph, dirs)
    integrand = graph.mul(graph.mul(f_r, radiance), graph.tile_last(cos_i, 3))
    summed = graph.sum(graph.reshape(integrand, (m, k, 3)), axis=1)
    return graph.affine(summed, scale=2.0 * math.pi / k)


def make_shading_fn(material_source, light_source, k: int = DEFAULT_K, brdf: Optional[BrdfFn] = None):
    """Adapter for the renderer: (graph, points, normals node, view dirs) -> color node."""
    def shading_fn(graph: DiffGraph, points: np.ndarray, normals: int, view_dirs: np.ndarray) -> int:
        material = material_source.material_nodes(graph, points)
        return shade_nodes(graph, normals, view_dirs, material, light_source, k, brdf)
    return shading_fn


def shade(x_s, n, omega_o, mat: PBRSample, light, k: int = DEFAULT_K,
          brdf: Optional[BrdfFn] = None):
    """
    Numpy shading for P points: returns (radiance (P, 3), back_facing (P,) flags).
    Back-facing points (n.wo <= 0) get zero radiance.
    `light` needs `radiance_node(graph, dirs)`.
    """
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    omega_o = np.atleast_2d(np.asarray(omega_o, dtype=np.float64))
    out = np.zeros((len(n), 3))
    back = np.einsum("ij,ij->i", n, omega_o) <= 0.0
    front = np.flatnonzero(~back)
    if front.size:
        graph = DiffGraph()
        material = {
            "albedo": graph.constant(mat.albedo[front]),
            "roughness": graph.constant(mat.roughness[front]),
            "metallic": graph.constant(mat.metallic[front]),
        }
        node = shade_nodes(graph, graph.constant(n[front]), omega_o[front], material, light, k, brdf)
        out[front] = graph.value(node)
    return out, back
