"""
Analytic scenes: closed-form SDF shapes, procedural PBR materials and
environment lights. Every piece round-trips through a plain-dict recipe
(the `material_gt.json` record) and exposes the same duck-typed interface as
the trained fields:

- geometry: sdf(points), sdf_and_gradient(points), sdf_nodes(graph, points, with_gradient)
- material: material(points) -> PBRSample, material_nodes(graph, points)
- light:    radiance(dirs), radiance_node(graph, dirs)

Analytic sources enter graphs as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.autodiff import DiffGraph
from services.fields import PBRSample

# ---- SETTINGS ----
GRADIENT_STEP = 1e-5
EQUIRECT_SIZE = (32, 64)  # height, width


def _vec(values: Sequence[float], n: int = 3) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} numbers, got {list(np.asarray(values).reshape(-1))}")
    return arr


def _unit(values: Sequence[float]) -> np.ndarray:
    v = _vec(values)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("direction must be non-zero")
    return v / norm


# ---------- Geometry ----------

class Shape:
    """Base for analytic signed-distance shapes."""
    kind = "shape"

    def sdf(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sdf_and_gradient(self, points: np.ndarray, with_gradient: bool = True):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        values = self.sdf(points)
        if not with_gradient:
            return values, None
        return values, central_gradient(self.sdf, points)

    def sdf_nodes(self, graph: DiffGraph, points: np.ndarray, with_gradient: bool = False):
        values, grad = self.sdf_and_gradient(points, with_gradient)
        return graph.constant(values), (graph.constant(grad) if with_gradient else None)

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError


def central_gradient(fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray,
                     step: float = GRADIENT_STEP) -> np.ndarray:
    grad = np.empty_like(points)
    for a in range(3):
        offset = np.zeros(3)
        offset[a] = step
        grad[:, a] = (fn(points + offset) - fn(points - offset)) / (2.0 * step)
    return grad


@dataclass
class Sphere(Shape):
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.5
    kind = "sphere"

    def sdf(self, points):
        return np.linalg.norm(np.atleast_2d(points) - self.center, axis=1) - self.radius

    def to_dict(self):
        return {"type": self.kind, "center": list(map(float, self.center)), "radius": float(self.radius)}


@dataclass
class Box(Shape):
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_size: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    kind = "box"

    def sdf(self, points):
        q = np.abs(np.atleast_2d(points) - self.center) - self.half_size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def to_dict(self):
        return {"type": self.kind, "center": list(map(float, self.center)),
                "half_size": list(map(float, self.half_size))}


@dataclass
class Torus(Shape):
    """Ring in the xz plane around the y axis."""
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    major: float = 0.4
    minor: float = 0.15
    kind = "torus"

    def sdf(self, points):
        p = np.atleast_2d(points) - self.center
        ring = np.hypot(p[:, 0], p[:, 2]) - self.major
        return np.hypot(ring, p[:, 1]) - self.minor

    def to_dict(self):
        return {"type": self.kind, "center": list(map(float, self.center)),
                "major": float(self.major), "minor": float(self.minor)}


@dataclass
class Combine(Shape):
    """Hard or smooth CSG of two shapes."""
    op: str = "union"
    a: Shape = None
    b: Shape = None
    k: float = 0.0

    OPS = ("union", "intersection", "subtraction", "smooth_union", "smooth_subtraction")

    def __post_init__(self) -> None:
        if self.op not in self.OPS:
            raise ValueError(f"unknown CSG op '{self.op}' (available: {', '.join(self.OPS)})")
        if self.op.startswith("smooth") and self.k <= 0:
            raise ValueError(f"{self.op} needs a positive blend radius k, got {self.k}")

    @property
    def kind(self) -> str:
        return self.op

    def sdf(self, points):
        da, db = self.a.sdf(points), self.b.sdf(points)
        if self.op == "union":
            return np.minimum(da, db)
        if self.op == "intersection":
            return np.maximum(da, db)
        if self.op == "subtraction":
            return np.maximum(da, -db)
        if self.op == "smooth_union":
            h = np.clip(0.5 + 0.5 * (db - da) / self.k, 0.0, 1.0)
            return db + (da - db) * h - self.k * h * (1.0 - h)
        # smooth_subtraction: a minus b
        h = np.clip(0.5 - 0.5 * (da + db) / self.k, 0.0, 1.0)
        return da + (-db - da) * h + self.k * h * (1.0 - h)

    def to_dict(self):
        out = {"type": self.op, "a": self.a.to_dict(), "b": self.b.to_dict()}
        if self.op.startswith("smooth"):
            out["k"] = float(self.k)
        return out


def shape_from_dict(d: Dict[str, Any]) -> Shape:
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(center=_vec(d.get("center", [0, 0, 0])), radius=float(d["radius"]))
    if kind == "box":
        return Box(center=_vec(d.get("center", [0, 0, 0])), half_size=_vec(d["half_size"]))
    if kind == "torus":
        return Torus(center=_vec(d.get("center", [0, 0, 0])), major=float(d["major"]), minor=float(d["minor"]))
    if kind in Combine.OPS:
        return Combine(op=kind, a=shape_from_dict(d["a"]), b=shape_from_dict(d["b"]), k=float(d.get("k", 0.0)))
    raise ValueError(f"unknown shape type '{kind}'")


# ---------- Materials ----------

@dataclass
class PBRValue:
    albedo: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    roughness: float = 0.5
    metallic: float = 0.0

    def __post_init__(self) -> None:
        self.albedo = tuple(float(x) for x in _vec(self.albedo))
        if not all(0.0 <= x <= 1.0 for x in self.albedo):
            raise ValueError(f"albedo must lie in [0, 1], got {self.albedo}")
        if not 0.01 <= self.roughness <= 1.0:
            raise ValueError(f"roughness must lie in [0.01, 1], got {self.roughness}")
        if not 0.0 <= self.metallic <= 1.0:
            raise ValueError(f"metallic must lie in [0, 1], got {self.metallic}")

    def as_row(self) -> np.ndarray:
        return np.array([*self.albedo, self.roughness, self.metallic])

    def to_dict(self):
        return {"albedo": list(self.albedo), "roughness": float(self.roughness), "metallic": float(self.metallic)}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "PBRValue":
        return cls(albedo=tuple(d["albedo"]), roughness=float(d["roughness"]), metallic=float(d["metallic"]))


class Material:
    """Base for procedural materials; subclasses fill `values(points) -> (N, 5)`."""
    kind = "material"

    def values(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def material(self, points: np.ndarray) -> PBRSample:
        return PBRSample.from_array(self.values(np.atleast_2d(np.asarray(points, dtype=np.float64))))

    def material_nodes(self, graph: DiffGraph, points: np.ndarray) -> Dict[str, int]:
        pbr = self.material(points)
        return {"albedo": graph.constant(pbr.albedo), "roughness": graph.constant(pbr.roughness),
                "metallic": graph.constant(pbr.metallic)}

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError


@dataclass
class ConstantMaterial(Material):
    value: PBRValue = field(default_factory=PBRValue)
    kind = "constant"

    def values(self, points):
        return np.tile(self.value.as_row(), (len(points), 1))

    def to_dict(self):
        return {"type": self.kind, **self.value.to_dict()}


@dataclass
class HemispheresMaterial(Material):
    """`upper` where (x - center) . axis >= 0, else `lower`."""
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    upper: PBRValue = field(default_factory=PBRValue)
    lower: PBRValue = field(default_factory=PBRValue)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kind = "hemispheres"

    def values(self, points):
        side = (points - self.center) @ _unit(self.axis) >= 0.0
        return np.where(side[:, None], self.upper.as_row(), self.lower.as_row())

    def to_dict(self):
        return {"type": self.kind, "axis": list(map(float, self.axis)), "center": list(map(float, self.center)),
                "upper": self.upper.to_dict(), "lower": self.lower.to_dict()}


@dataclass
class StripeMaterial(Material):
    """`stripe` where |x . axis - offset| < width / 2, else `base`."""
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    width: float = 0.1
    offset: float = 0.0
    base: PBRValue = field(default_factory=PBRValue)
    stripe: PBRValue = field(default_factory=lambda: PBRValue((0.9, 0.8, 0.5), 0.3, 1.0))
    kind = "stripe"

    def values(self, points):
        inside = np.abs(points @ _unit(self.axis) - self.offset) < 0.5 * self.width
        return np.where(inside[:, None], self.stripe.as_row(), self.base.as_row())

    def to_dict(self):
        return {"type": self.kind, "axis": list(map(float, self.axis)), "width": float(self.width),
                "offset": float(self.offset), "base": self.base.to_dict(), "stripe": self.stripe.to_dict()}


class EditedMaterial(Material):
    """Albedo override inside an axis-aligned box; roughness/metallic pass through."""
    kind = "edited"

    def __init__(self, base, albedo: Sequence[float], box_min: Sequence[float], box_max: Sequence[float]) -> None:
        self.base = base
        self.albedo = _vec(albedo)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError(f"edit albedo must lie in [0, 1], got {list(self.albedo)}")
        self.box_min, self.box_max = _vec(box_min), _vec(box_max)
        if np.any(self.box_min >= self.box_max):
            raise ValueError("edit box needs min < max on every axis")

    def inside(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.box_min) & (points <= self.box_max), axis=1)

    def material(self, points):
        pbr = self.base.material(points)
        pbr.albedo[self.inside(points)] = self.albedo
        return pbr

    def values(self, points):
        return self.material(points).as_array()

    def material_nodes(self, graph: DiffGraph, points: np.ndarray) -> Dict[str, int]:
        nodes = dict(self.base.material_nodes(graph, points))
        inside = self.inside(points).astype(np.float64)[:, None] * np.ones(3)
        kept = graph.mul(nodes["albedo"], graph.constant(1.0 - inside))
        nodes["albedo"] = graph.add(kept, graph.constant(inside * self.albedo))
        return nodes


def material_from_dict(d: Dict[str, Any]) -> Material:
    kind = d.get("type")
    if kind == "constant":
        return ConstantMaterial(PBRValue.from_dict(d))
    if kind == "hemispheres":
        return HemispheresMaterial(axis=_vec(d["axis"]), upper=PBRValue.from_dict(d["upper"]),
                                   lower=PBRValue.from_dict(d["lower"]), center=_vec(d.get("center", [0, 0, 0])))
    if kind == "stripe":
        return StripeMaterial(axis=_vec(d["axis"]), width=float(d["width"]), offset=float(d.get("offset", 0.0)),
                              base=PBRValue.from_dict(d["base"]), stripe=PBRValue.from_dict(d["stripe"]))
    raise ValueError(f"unknown material type '{kind}'")


# ---------- Lights ----------

class Light:
    kind = "light"

    def radiance(self, dirs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def radiance_node(self, graph: DiffGraph, dirs: int) -> int:
        return graph.constant(self.radiance(graph.value(dirs)))

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError


@dataclass
class ConstantLight(Light):
    rgb: np.ndarray = field(default_factory=lambda: np.ones(3))
    kind = "constant"

    def radiance(self, dirs):
        return np.tile(_vec(self.rgb), (len(np.atleast_2d(dirs)), 1))

    def to_dict(self):
        return {"type": self.kind, "rgb": list(map(float, self.rgb))}


@dataclass
class Lobe:
    direction: np.ndarray
    kappa: float
    rgb: np.ndarray


@dataclass
class LobeLight(Light):
    """Ambient term plus up to four von Mises-Fisher lobes rgb * exp(kappa (mu.w - 1))."""
    ambient: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lobes: List[Lobe] = field(default_factory=list)
    kind = "lobes"

    MAX_LOBES = 4

    def __post_init__(self) -> None:
        if len(self.lobes) > self.MAX_LOBES:
            raise ValueError(f"at most {self.MAX_LOBES} lobes, got {len(self.lobes)}")

    def radiance(self, dirs):
        dirs = np.atleast_2d(dirs)
        out = np.tile(_vec(self.ambient), (len(dirs), 1))
        for lobe in self.lobes:
            weight = np.exp(lobe.kappa * (dirs @ _unit(lobe.direction) - 1.0))
            out += weight[:, None] * _vec(lobe.rgb)
        return out

    def to_dict(self):
        return {"type": self.kind, "ambient": list(map(float, self.ambient)),
                "lobes": [{"direction": list(map(float, l.direction)), "kappa": float(l.kappa),
                           "rgb": list(map(float, l.rgb))} for l in self.lobes]}


@dataclass
class EquirectLight(Light):
    """
    Latitude-longitude table (H, W, 3) with bilinear lookup.
    phi = atan2(x, z) maps to columns, theta = arccos(y) to rows (row 0 is +y).
    """
    table: np.ndarray = field(default_factory=lambda: np.ones((EQUIRECT_SIZE[0], EQUIRECT_SIZE[1], 3)))
    kind = "equirect"

    def radiance(self, dirs):
        dirs = np.atleast_2d(dirs)
        height, width = self.table.shape[:2]
        phi = np.arctan2(dirs[:, 0], dirs[:, 2])
        theta = np.arccos(np.clip(dirs[:, 1], -1.0, 1.0))
        x = (phi + math.pi) / (2.0 * math.pi) * width - 0.5
        y = np.clip(theta / math.pi * height - 0.5, 0.0, height - 1.0)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.minimum(np.floor(y).astype(np.int64), height - 1)
        fx, fy = (x - x0)[:, None], (y - y0)[:, None]
        x0w, x1w = x0 % width, (x0 + 1) % width
        y1 = np.minimum(y0 + 1, height - 1)
        top = self.table[y0, x0w] * (1 - fx) + self.table[y0, x1w] * fx
        bottom = self.table[y1, x0w] * (1 - fx) + self.table[y1, x1w] * fx
        return top * (1 - fy) + bottom * fy

    def to_dict(self):
        return {"type": self.kind, "table": np.asarray(self.table).tolist()}


def equirect_directions(height: int, width: int) -> np.ndarray:
    """Unit directions at the pixel centers of an (H, W) lat-long map, row-major."""
    theta = (np.arange(height) + 0.5) / height * math.pi
    phi = (np.arange(width) + 0.5) / width * 2.0 * math.pi - math.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.sin(ph), np.cos(th), np.sin(th) * np.cos(ph)], axis=-1)
    return dirs.reshape(-1, 3)


def bake_equirect(light, height: int = EQUIRECT_SIZE[0], width: int = EQUIRECT_SIZE[1]) -> np.ndarray:
    """(H, W, 3) lat-long table of any light source."""
    return np.asarray(light.radiance(equirect_directions(height, width))).reshape(height, width, 3)


def light_from_dict(d: Dict[str, Any]) -> Light:
    kind = d.get("type")
    if kind == "constant":
        return ConstantLight(_vec(d["rgb"]))
    if kind == "lobes":
        lobes = [Lobe(_unit(l["direction"]), float(l["kappa"]), _vec(l["rgb"])) for l in d.get("lobes", [])]
        return LobeLight(ambient=_vec(d.get("ambient", [0, 0, 0])), lobes=lobes)
    if kind == "equirect":
        table = np.asarray(d["table"], dtype=np.float64)
        if table.ndim != 3 or table.shape[2] != 3:
            raise ValueError(f"equirect table must be (H, W, 3), got {table.shape}")
        return EquirectLight(table)
    raise ValueError(f"unknown light type '{kind}'")


def _sky_table(height: int = EQUIRECT_SIZE[0], width: int = EQUIRECT_SIZE[1]) -> np.ndarray:
    zenith, horizon, ground = np.array([0.35, 0.55, 1.0]), np.array([1.0, 0.95, 0.9]), np.array([0.3, 0.25, 0.2])
    rows = []
    for i in range(height):
        y = math.cos((i + 0.5) / height * math.pi)
        color = horizon + (zenith - horizon) * y if y >= 0 else horizon + (ground - horizon) * min(1.0, -4.0 * y)
        rows.append(np.tile(color, (width, 1)))
    return np.stack(rows)


NAMED_LIGHTS: Dict[str, Callable[[], Light]] = {
    "white": lambda: ConstantLight(np.ones(3)),
    "studio": lambda: LobeLight(
        ambient=np.array([0.35, 0.35, 0.35]),
        lobes=[Lobe(_unit([0.5, 0.7, -0.5]), 6.0, np.array([1.1, 1.0, 0.9])),
               Lobe(_unit([-0.6, 0.3, 0.4]), 4.0, np.array([0.35, 0.45, 0.6]))],
    ),
    "sunset": lambda: LobeLight(
        ambient=np.array([0.15, 0.15, 0.25]),
        lobes=[Lobe(_unit([0.9, 0.15, 0.1]), 10.0, np.array([1.6, 0.8, 0.4]))],
    ),
    "sky": lambda: EquirectLight(_sky_table()),
}


def named_light(name: str) -> Light:
    if name not in NAMED_LIGHTS:
        raise ValueError(f"unknown light '{name}' (available: {', '.join(sorted(NAMED_LIGHTS))})")
    return NAMED_LIGHTS[name]()


# ---------- Scenes ----------

@dataclass
class AnalyticScene:
    name: str
    shape: Shape
    material_fn: Material
    light: Light

    # geometry interface
    def sdf(self, points):
        return self.shape.sdf(np.atleast_2d(points))

    def sdf_and_gradient(self, points, with_gradient: bool = True):
        return self.shape.sdf_and_gradient(points, with_gradient)

    def sdf_nodes(self, graph, points, with_gradient=False):
        return self.shape.sdf_nodes(graph, points, with_gradient)

    # material interface
    def material(self, points) -> PBRSample:
        return self.material_fn.material(points)

    def material_nodes(self, graph, points):
        return self.material_fn.material_nodes(graph, points)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "geometry": self.shape.to_dict(), "material": self.material_fn.to_dict(),
                "light": self.light.to_dict()}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "AnalyticScene":
        for key in ("geometry", "material", "light"):
            if key not in d:
                raise ValueError(f"scene recipe is missing '{key}'")
        return cls(name=str(d.get("name", "custom")), shape=shape_from_dict(d["geometry"]),
                   material_fn=material_from_dict(d["material"]), light=light_from_dict(d["light"]))


def _sphere_scene() -> AnalyticScene:
    return AnalyticScene("sphere", Sphere(np.zeros(3), 0.5),
                         ConstantMaterial(PBRValue((0.7, 0.4, 0.3), 0.6, 0.0)), named_light("studio"))


def _bimaterial_scene() -> AnalyticScene:
    material = HemispheresMaterial(axis=np.array([0.0, 1.0, 0.0]),
                                   upper=PBRValue((0.8, 0.25, 0.2), 0.4, 0.0),
                                   lower=PBRValue((0.2, 0.35, 0.8), 0.7, 0.0))
    return AnalyticScene("bimaterial", Sphere(np.zeros(3), 0.5), material, named_light("studio"))


def _torus_box_scene() -> AnalyticScene:
    shape = Combine("subtraction", Torus(np.zeros(3), 0.45, 0.18), Box(np.array([0.45, 0.0, 0.0]), np.full(3, 0.2)))
    material = StripeMaterial(axis=np.array([0.0, 1.0, 0.0]), width=0.12,
                              base=PBRValue((0.5, 0.5, 0.55), 0.6, 0.0),
                              stripe=PBRValue((0.9, 0.8, 0.5), 0.3, 1.0))
    return AnalyticScene("torus_box", shape, material, named_light("studio"))


STOCK_SCENES: Dict[str, Callable[[], AnalyticScene]] = {
    "sphere": _sphere_scene,
    "bimaterial": _bimaterial_scene,
    "torus_box": _torus_box_scene,
}


def stock_scene(name: str) -> AnalyticScene:
    if name not in STOCK_SCENES:
        raise ValueError(f"unknown scene '{name}' (available: {', '.join(sorted(STOCK_SCENES))})")
    return STOCK_SCENES[name]()
