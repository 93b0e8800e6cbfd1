"""
Zero-level-set extraction and PBR baking.

1) sample the SDF once on an (R+1)^3 lattice over the bounds (chunked, cached)
2) run the standard 256-case Marching Cubes table (PyMCubes) with linear edge interpolation
3) orient faces so normals follow the SDF gradient, drop degenerate faces
4) bake per-vertex normals (normalized SDF gradient) and PBR values (material field)
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import mcubes
import numpy as np
import pandas as pd
import trimesh

from utils.ids import IDS

logger = logging.getLogger("mesh")

# ---- SETTINGS ----
MIN_RESOLUTION = 8
GRID_CHUNK = 65536
NORMAL_EPS = 1e-9
MESH_FORMATS = ("obj", "ply")
# PLY vertex properties after x y z nx ny nz, all float32
PLY_PBR_PROPS = ("red_f", "green_f", "blue_f", "roughness", "metallic")


@dataclass
class TriangleMesh:
    vertices: np.ndarray                        # (V, 3)
    faces: np.ndarray                           # (F, 3) int64
    normals: Optional[np.ndarray] = None        # (V, 3)
    pbr: Optional[np.ndarray] = None            # (V, 5) albedo RGB, roughness, metallic
    empty: bool = False
    fallback_normals: int = 0
    grid_spacing: float = field(default=0.0)

    @property
    def num_vertices(self) -> int:
        return int(len(self.vertices))

    @property
    def num_faces(self) -> int:
        return int(len(self.faces))

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    def euler_number(self) -> int:
        return int(self.to_trimesh().euler_number)

    def is_watertight(self) -> bool:
        return bool(self.to_trimesh().is_watertight)


def _bounds(bounds) -> Tuple[np.ndarray, np.ndarray]:
    """Accept a half-width scalar or a (lo, hi) pair of 3-vectors."""
    if np.isscalar(bounds):
        half = float(bounds)
        return np.full(3, -half), np.full(3, half)
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(-1) for b in bounds)
    if lo.size == 1:
        lo, hi = np.full(3, lo[0]), np.full(3, hi[0])
    if np.any(lo >= hi):
        raise ValueError(f"mesh bounds need lo < hi on every axis, got {lo} and {hi}")
    return lo, hi


# ---------- Grid sampling ----------

def sample_grid(sdf_fn, bounds, resolution: int, threads: int = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SDF on the (R+1)^3 lattice; returns (volume, lo, hi)."""
    lo, hi = _bounds(bounds)
    axes = [np.linspace(lo[a], hi[a], resolution + 1) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    points = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=1)
    starts = list(range(0, len(points), GRID_CHUNK))

    def run(start: int) -> np.ndarray:
        return np.asarray(sdf_fn(points[start:start + GRID_CHUNK]), dtype=np.float64).reshape(-1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(run, starts))
    else:
        values = [run(s) for s in starts]
    volume = np.concatenate(values).reshape(gx.shape)
    return volume, lo, hi


# ---------- Extraction ----------

def marching_cubes(sdf_fn, bounds=1.0, resolution: int = 64, threads: int = 1) -> TriangleMesh:
    """
    Triangulate the zero level set of `sdf_fn` (points (N, 3) -> values (N,)).
    No zero crossing inside the bounds gives an empty mesh with `empty=True`.
    """
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"marching cubes resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    volume, lo, hi = sample_grid(sdf_fn, bounds, resolution, threads)
    return mesh_from_volume(volume, lo, hi)


def mesh_from_volume(volume: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> TriangleMesh:
    resolution = volume.shape[0] - 1
    spacing = (hi - lo) / resolution
    if not (volume.min() < 0.0 < volume.max()):
        logger.warning("no zero crossing inside the bounds; mesh is empty")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), empty=True,
                            grid_spacing=float(spacing.max()))

    verts_idx, faces = mcubes.marching_cubes(volume, 0.0)
    faces = np.asarray(faces, dtype=np.int64)
    vertices = lo + np.asarray(verts_idx, dtype=np.float64) * spacing

    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    vertices, faces = _drop_unused(vertices, faces)
    faces = _orient_faces(vertices, faces, volume, lo, spacing)

    mesh = TriangleMesh(vertices, faces, grid_spacing=float(spacing.max()))
    logger.info("marching cubes at R=%d: %d vertices, %d faces", resolution, mesh.num_vertices, mesh.num_faces)
    return mesh


def _drop_unused(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    used = np.unique(faces.reshape(-1))
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces]


def _face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized (area-weighted) face normals."""
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return np.cross(b - a, c - a)


def _orient_faces(vertices, faces, volume, lo, spacing) -> np.ndarray:
    """Flip every face if most face normals disagree with the lattice SDF gradient."""
    grads = np.stack(np.gradient(volume, *spacing), axis=-1)
    centroids = vertices[faces].mean(axis=1)
    idx = np.clip(np.rint((centroids - lo) / spacing).astype(np.int64), 0, volume.shape[0] - 1)
    g = grads[idx[:, 0], idx[:, 1], idx[:, 2]]
    agree = np.einsum("ij,ij->i", _face_normals(vertices, faces), g) > 0
    if agree.mean() < 0.5:
        return faces[:, [0, 2, 1]]
    return faces


# ---------- Baking ----------

def bake_attributes(mesh: TriangleMesh, geometry, material) -> TriangleMesh:
    """
    Per-vertex normals from the geometry gradient and PBR values from the material.
    Degenerate gradients fall back to area-weighted face normals (count kept on the mesh).
    """
    if mesh.empty or mesh.num_vertices == 0:
        raise ValueError("cannot bake attributes onto an empty mesh")

    _, grad = geometry.sdf_and_gradient(mesh.vertices)
    norm = np.linalg.norm(grad, axis=1)
    bad = ~np.isfinite(norm) | (norm <= NORMAL_EPS)
    normals = np.zeros_like(grad)
    normals[~bad] = grad[~bad] / norm[~bad, None]
    if bad.any():
        normals[bad] = area_weighted_normals(mesh.vertices, mesh.faces)[bad]
        logger.warning("bake: %d vertices fell back to face normals", int(bad.sum()))

    pbr = material.material(mesh.vertices).as_array()
    return replace(mesh, normals=normals, pbr=pbr, fallback_normals=int(bad.sum()))


def area_weighted_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    accum = np.zeros_like(vertices)
    fn = _face_normals(vertices, faces)
    for i in range(3):
        np.add.at(accum, faces[:, i], fn)
    norm = np.linalg.norm(accum, axis=1, keepdims=True)
    return accum / np.maximum(norm, 1e-300)


# ---------- Export ----------

def to_export_trimesh(mesh: TriangleMesh, normals: np.ndarray, pbr: np.ndarray) -> trimesh.Trimesh:
    """trimesh view of a baked mesh; PBR channels ride along as float32 vertex attributes."""
    attributes = {name: pbr[:, i].astype(np.float32) for i, name in enumerate(PLY_PBR_PROPS)}
    return trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, vertex_normals=normals,
                           vertex_attributes=attributes, process=False)


def export_mesh(mesh: TriangleMesh, path: Union[str, Path], fmt: Optional[str] = None) -> list:
    """
    Write the mesh; returns the written paths.
    - obj: positions, normals and faces via trimesh, plus `<stem>_pbr.csv` (1-based vertex column)
    - ply: binary, with normals and the PBR channels as vertex properties
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in MESH_FORMATS:
        raise ValueError(f"unknown mesh format '{fmt}' (available: {', '.join(MESH_FORMATS)})")
    if mesh.empty or mesh.num_faces == 0:
        raise ValueError("refusing to export an empty mesh (no zero crossing was found)")
    normals = mesh.normals if mesh.normals is not None else area_weighted_normals(mesh.vertices, mesh.faces)
    pbr = mesh.pbr if mesh.pbr is not None else np.tile([0.5, 0.5, 0.5, 0.5, 0.0], (mesh.num_vertices, 1))
    tm = to_export_trimesh(mesh, normals, pbr)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "ply":
            tm.export(path, file_type="ply", encoding="binary", vertex_normal=True)
            return [path]
        tm.export(path, file_type="obj", include_normals=True, include_color=False, include_texture=False)
        sidecar = path.with_name(f"{path.stem}_pbr.csv")
        df = pd.DataFrame(pbr, columns=list(IDS.PBR_COLUMNS))
        df.insert(0, "vertex", np.arange(1, len(pbr) + 1))
        df.to_csv(sidecar, index=False, float_format="%.9g")
        return [path, sidecar]
    except OSError as e:
        raise ValueError(f"cannot write mesh to {path}: {e.strerror or e}")


def _vertex_columns(tm: trimesh.Trimesh, names) -> Optional[np.ndarray]:
    """Named per-vertex PLY properties, from vertex_attributes or the raw PLY elements."""
    attrs = dict(getattr(tm, "vertex_attributes", None) or {})
    raw = tm.metadata.get("_ply_raw", {}).get("vertex", {}).get("data")
    if raw is not None:
        keys = raw.dtype.names if hasattr(raw, "dtype") else tuple(raw)
        attrs.update({k: raw[k] for k in keys or () if k not in attrs})
    if not all(name in attrs for name in names):
        return None
    return np.stack([np.asarray(attrs[name], dtype=np.float64).reshape(-1) for name in names], axis=1)


def read_ply(path: Union[str, Path]) -> TriangleMesh:
    """Load a PLY written by `export_mesh` (PBR channels are None when the file has none)."""
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"Missing mesh file: {path}")
    if path.read_bytes()[:3] != b"ply":
        raise ValueError(f"{path}: not a PLY file")
    try:
        tm = trimesh.load(path, file_type="ply", force="mesh", process=False)
    except Exception as e:
        raise ValueError(f"{path}: unreadable PLY ({e})")

    normals = _vertex_columns(tm, ("nx", "ny", "nz"))
    return TriangleMesh(
        vertices=np.asarray(tm.vertices, dtype=np.float64),
        faces=np.asarray(tm.faces, dtype=np.int64),
        normals=normals,
        pbr=_vertex_columns(tm, PLY_PBR_PROPS),
    )


def mesh_stats(mesh: TriangleMesh) -> dict:
    if mesh.empty:
        return {"vertices": 0, "faces": 0, "empty": True}
    return {
        "vertices": mesh.num_vertices,
        "faces": mesh.num_faces,
        "empty": False,
        "euler_number": mesh.euler_number(),
        "watertight": mesh.is_watertight(),
        "fallback_normals": mesh.fallback_normals,
    }


def edge_sign_check(mesh: TriangleMesh, sdf_fn, bounds, resolution: int) -> float:
    """
    Fraction of vertices lying on a lattice edge whose endpoint SDF values differ in sign
    (exact table interpolation gives 1.0).
    """
    lo, hi = _bounds(bounds)
    spacing = (hi - lo) / resolution
    rel = (mesh.vertices - lo) / spacing
    on_lattice = np.abs(rel - np.rint(rel)) < 1e-6
    ok = 0
    for v, r, flags in zip(mesh.vertices, rel, on_lattice):
        free = np.flatnonzero(~flags)
        if free.size != 1:
            ok += int(free.size == 0)
            continue
        a = free[0]
        p0 = lo + np.rint(r) * spacing
        p0[a] = lo[a] + np.floor(r[a]) * spacing[a]
        p1 = p0.copy()
        p1[a] += spacing[a]
        s0, s1 = np.asarray(sdf_fn(np.stack([p0, p1]))).reshape(-1)
        ok += int(s0 * s1 <= 0)
    return ok / max(1, mesh.num_vertices)
