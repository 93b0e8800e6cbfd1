"""
The three neural fields of the scene:

- geometry: x -> signed distance (softplus MLP, sphere initialization)
- material: x -> (albedo RGB, roughness, metallic) (ReLU MLP, squashed heads)
- light:    direction -> RGB radiance (ReLU MLP or 9-term spherical harmonics)

Every field is evaluated by building ops on a `DiffGraph`; the numpy query
helpers run the same ops on a throwaway graph so training and inference share
one code path.

The SDF gradient is not taken by differentiating the tape twice. It is built
as forward tangents alongside the activations (one tangent per axis), so
d(sdf)/dx is itself a graph node and the Eikonal loss can be backpropagated
to the weights with first-order reverse mode only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.autodiff import DiffGraph
from utils.ids import IDS

logger = logging.getLogger("fields")

# ---- SETTINGS ----
ROUGHNESS_FLOOR = 0.01
NORMAL_EPS = 1e-9
UNIT_TOLERANCE = 1e-6
QUERY_CHUNK = 2048
LIGHT_MODELS = ("mlp", "sh9")

# Real spherical-harmonic constants, bands 0..2
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)


# ---- CONFIG ----
@dataclass
class PositionalEncodingConfig:
    num_frequencies: int = 6
    include_input: bool = True

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * (1 if self.include_input else 0) + input_dim * 2 * self.num_frequencies


@dataclass
class FieldConfig:
    geometry_layers: int = 8
    geometry_width: int = 256
    geometry_frequencies: int = 6
    material_layers: int = 8
    material_width: int = 256
    material_frequencies: int = 4
    light_layers: int = 4
    light_width: int = 64
    light_frequencies: int = 2
    light_model: str = "mlp"
    skip_layer: int = 4
    softplus_beta: float = 100.0
    init_radius: float = 0.5
    include_input: bool = True

    def __post_init__(self) -> None:
        if self.light_model not in LIGHT_MODELS:
            raise ValueError(f"light_model must be one of {LIGHT_MODELS}, got '{self.light_model}'")
        for name in ("geometry_layers", "material_layers", "light_layers",
                     "geometry_width", "material_width", "light_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("geometry_frequencies", "material_frequencies", "light_frequencies"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.softplus_beta <= 0:
            raise ValueError(f"softplus_beta must be positive, got {self.softplus_beta}")


# ---- DOMAIN TYPES ----
@dataclass
class GeometrySample:
    sdf: np.ndarray        # (N,)
    gradient: np.ndarray   # (N, 3)
    normal: np.ndarray     # (N, 3), zero where invalid
    valid: np.ndarray      # (N,) bool


@dataclass
class PBRSample:
    albedo: np.ndarray     # (N, 3)
    roughness: np.ndarray  # (N,)
    metallic: np.ndarray   # (N,)

    def as_array(self) -> np.ndarray:
        """(N, 5) layout: albedo RGB, roughness, metallic."""
        return np.concatenate([self.albedo, self.roughness[:, None], self.metallic[:, None]], axis=1)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "PBRSample":
        values = np.asarray(values, dtype=np.float64)
        return cls(albedo=values[:, :3].copy(), roughness=values[:, 3].copy(), metallic=values[:, 4].copy())

    @classmethod
    def constant(cls, n: int, albedo, roughness: float, metallic: float) -> "PBRSample":
        return cls(
            albedo=np.tile(np.asarray(albedo, dtype=np.float64), (n, 1)),
            roughness=np.full(n, float(roughness)),
            metallic=np.full(n, float(metallic)),
        )


@dataclass
class FieldNetwork:
    """
    MLP parameters plus the settings needed to evaluate them.
    - kind: "geometry" | "material" | "light"
    - widths: hidden layer widths (len == layer count)
    - params: name -> array, names prefixed by kind ("geometry.w0", ...)
    - heads: output slices (start, stop, squash)
    """
    kind: str
    widths: List[int]
    encoding: PositionalEncodingConfig
    activation: str
    heads: Dict[str, Tuple[int, int, str]]
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    skip_layer: int = 0
    softplus_beta: float = 100.0
    model: str = "mlp"

    @property
    def num_layers(self) -> int:
        return len(self.widths)

    @property
    def output_dim(self) -> int:
        return max(stop for _, stop, _ in self.heads.values())

    def has_skip(self) -> bool:
        return self.model == "mlp" and 0 < self.skip_layer < self.num_layers

    def bind(self, graph: DiffGraph, trainable: bool = True,
             leaves: Optional[Dict[str, int]] = None) -> "BoundField":
        """Attach the parameters to `graph` (shared `leaves` dict keeps one leaf per name)."""
        return BoundField(self, GraphParams(graph, self.params, trainable, leaves))

    # --- frozen graph sources (parameters enter as constants) ---
    def sdf_nodes(self, graph: DiffGraph, points: np.ndarray, with_gradient: bool = False):
        return self.bind(graph, trainable=False).sdf_nodes(graph, points, with_gradient)

    def material_nodes(self, graph: DiffGraph, points: np.ndarray) -> Dict[str, int]:
        return self.bind(graph, trainable=False).material_nodes(graph, points)

    def radiance_node(self, graph: DiffGraph, dirs: int) -> int:
        return self.bind(graph, trainable=False).radiance_node(graph, dirs)

    # --- numpy queries (throwaway graphs, chunked) ---
    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self.sdf_and_gradient(points, with_gradient=False)[0]

    def sdf_and_gradient(self, points: np.ndarray, with_gradient: bool = True):
        self._expect("geometry")
        points = _as_points(points)
        sdfs, grads = [], []
        for start in range(0, len(points), QUERY_CHUNK):
            graph = DiffGraph()
            s_id, g_id = self.bind(graph, trainable=False).sdf_nodes(graph, points[start:start + QUERY_CHUNK],
                                                                     with_gradient)
            sdfs.append(graph.value(s_id).copy())
            if with_gradient:
                grads.append(graph.value(g_id).copy())
        sdf = np.concatenate(sdfs) if sdfs else np.zeros(0)
        if not with_gradient:
            return sdf, None
        return sdf, (np.concatenate(grads) if grads else np.zeros((0, 3)))

    def material(self, points: np.ndarray) -> PBRSample:
        self._expect("material")
        points = _as_points(points)
        chunks = []
        for start in range(0, len(points), QUERY_CHUNK):
            graph = DiffGraph()
            ids = self.bind(graph, trainable=False).material_nodes(graph, points[start:start + QUERY_CHUNK])
            chunks.append(np.concatenate([graph.value(ids["albedo"]),
                                          graph.value(ids["roughness"])[:, None],
                                          graph.value(ids["metallic"])[:, None]], axis=1))
        return PBRSample.from_array(np.concatenate(chunks) if chunks else np.zeros((0, 5)))

    def radiance(self, dirs: np.ndarray) -> np.ndarray:
        self._expect("light")
        dirs = _as_points(dirs)
        out = []
        for start in range(0, len(dirs), QUERY_CHUNK):
            graph = DiffGraph()
            d_id = graph.constant(dirs[start:start + QUERY_CHUNK])
            out.append(graph.value(self.bind(graph, trainable=False).radiance_node(graph, d_id)).copy())
        return np.concatenate(out) if out else np.zeros((0, 3))

    def _expect(self, kind: str) -> None:
        if self.kind != kind:
            raise ValueError(f"expected a {kind} field, got a {self.kind} field")


# ---------- Graph binding ----------

class GraphParams:
    """Parameter leaves of one graph, created on first use and shared by name."""

    def __init__(self, graph: DiffGraph, params: Dict[str, np.ndarray], trainable: bool = True,
                 leaves: Optional[Dict[str, int]] = None) -> None:
        self.graph = graph
        self.params = params
        self.trainable = trainable
        self.leaves = leaves if leaves is not None else {}

    def node(self, name: str) -> int:
        if name not in self.leaves:
            array = self.params[name]
            self.leaves[name] = self.graph.parameter(array) if self.trainable else self.graph.constant(array)
        return self.leaves[name]


class BoundField:
    """A FieldNetwork whose parameters are leaves of one graph."""

    def __init__(self, net: FieldNetwork, gp: GraphParams) -> None:
        self.net = net
        self.gp = gp

    def _p(self, short: str) -> int:
        return self.gp.node(f"{self.net.kind}.{short}")

    def _check_graph(self, graph: DiffGraph) -> None:
        if graph is not self.gp.graph:
            raise ValueError("field bound to a different graph")

    # --- geometry ---
    def sdf_nodes(self, graph: DiffGraph, points: np.ndarray, with_gradient: bool = False):
        """
        Returns (sdf node (N,), gradient node (N, 3) or None).
        Tangents are carried only when `with_gradient`.
        """
        self._check_graph(graph)
        net = self.net
        points = _as_points(points)
        n = len(points)
        enc = graph.constant(positional_encode(points, net.encoding))
        tangents0 = None
        if with_gradient:
            tangents0 = [graph.constant(j) for j in encoding_jacobian(points, net.encoding)]

        out, tangents = self._mlp(graph, enc, tangents0)
        sdf = graph.reshape(out, (n,))
        if not with_gradient:
            return sdf, None
        return sdf, graph.concat(tangents)

    # --- material ---
    def material_nodes(self, graph: DiffGraph, points: np.ndarray) -> Dict[str, int]:
        self._check_graph(graph)
        points = _as_points(points)
        n = len(points)
        enc = graph.constant(positional_encode(points, self.net.encoding))
        raw, _ = self._mlp(graph, enc, None)
        return _squash_material(graph, raw, n, self.net.heads)

    # --- light ---
    def radiance_node(self, graph: DiffGraph, dirs: int) -> int:
        """dirs: (M, 3) node of unit directions -> (M, 3) radiance node."""
        self._check_graph(graph)
        if self.net.model == "sh9":
            basis = _sh9_basis_nodes(graph, dirs)
            raw = graph.matmul(basis, self._p("sh"))
        else:
            enc = encode_nodes(graph, dirs, self.net.encoding)
            raw, _ = self._mlp(graph, enc, None)
        return graph.softplus(raw, 1.0)

    # --- shared MLP ---
    def _mlp(self, graph: DiffGraph, enc: int, tangents0: Optional[List[int]]):
        net = self.net
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        h, ts = enc, tangents0
        for i in range(net.num_layers):
            if i == net.skip_layer and net.has_skip():
                h = graph.affine(graph.concat([h, enc]), scale=inv_sqrt2)
                if ts is not None:
                    ts = [graph.affine(graph.concat([t, t0]), scale=inv_sqrt2) for t, t0 in zip(ts, tangents0)]
            w, b = self._p(f"w{i}"), self._p(f"b{i}")
            pre = graph.add(graph.matmul(h, w), b)
            if net.activation == "softplus":
                h = graph.softplus(pre, net.softplus_beta)
                if ts is not None:
                    gate = graph.sigmoid(graph.affine(pre, scale=net.softplus_beta))
                    ts = [graph.mul(graph.matmul(t, w), gate) for t in ts]
            else:
                h = graph.maximum(pre, 0.0)

        last = net.num_layers
        w, b = self._p(f"w{last}"), self._p(f"b{last}")
        out = graph.add(graph.matmul(h, w), b)
        if ts is not None:
            ts = [graph.matmul(t, w) for t in ts]
        return out, ts


def _squash_material(graph: DiffGraph, raw: int, n: int, heads: Dict[str, Tuple[int, int, str]]) -> Dict[str, int]:
    a0, a1, _ = heads["albedo"]
    r0, r1, _ = heads["roughness"]
    m0, m1, _ = heads["metallic"]
    albedo = graph.sigmoid(graph.slice(raw, a0, a1))
    rough = graph.clamp(graph.sigmoid(graph.reshape(graph.slice(raw, r0, r1), (n,))), ROUGHNESS_FLOOR, 1.0)
    metal = graph.sigmoid(graph.reshape(graph.slice(raw, m0, m1), (n,)))
    return {"albedo": albedo, "roughness": rough, "metallic": metal}


def _sh9_basis_nodes(graph: DiffGraph, dirs: int) -> int:
    m = graph.shape(dirs)[0]
    x, y, z = (graph.slice(dirs, i, i + 1) for i in range(3))
    c2a, c2b, c2c = _SH_C2
    cols = [
        graph.constant(np.full((m, 1), _SH_C0)),
        graph.affine(y, scale=_SH_C1),
        graph.affine(z, scale=_SH_C1),
        graph.affine(x, scale=_SH_C1),
        graph.affine(graph.mul(x, y), scale=c2a),
        graph.affine(graph.mul(y, z), scale=c2a),
        graph.affine(graph.square(z), scale=3.0 * c2b, shift=-c2b),
        graph.affine(graph.mul(x, z), scale=c2a),
        graph.affine(graph.sub(graph.square(x), graph.square(y)), scale=c2c),
    ]
    return graph.concat(cols)


def sh9_basis(dirs: np.ndarray) -> np.ndarray:
    """Numpy twin of the graph basis, used by tests and light fitting."""
    dirs = _as_points(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    c2a, c2b, c2c = _SH_C2
    return np.stack([
        np.full_like(x, _SH_C0), _SH_C1 * y, _SH_C1 * z, _SH_C1 * x,
        c2a * x * y, c2a * y * z, c2b * (3.0 * z * z - 1.0), c2a * x * z, c2c * (x * x - y * y),
    ], axis=1)


# ---------- Encoding ----------

def positional_encode(x: np.ndarray, cfg: PositionalEncodingConfig) -> np.ndarray:
    """
    Order: [x (if include_input), sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)],
    each block holding all coordinates of x.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if cfg.include_input else []
    for k in range(cfg.num_frequencies):
        arg = (2.0 ** k) * math.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return np.zeros(x.shape[:-1] + (0,))
    return np.concatenate(parts, axis=-1)


def encoding_jacobian(points: np.ndarray, cfg: PositionalEncodingConfig) -> List[np.ndarray]:
    """d(encoding)/d(x_a) for a = 0, 1, 2, each (N, D) in the encoding order."""
    points = _as_points(points)
    n, dim = points.shape
    columns = []
    for a in range(dim):
        parts = []
        if cfg.include_input:
            block = np.zeros((n, dim))
            block[:, a] = 1.0
            parts.append(block)
        for k in range(cfg.num_frequencies):
            freq = (2.0 ** k) * math.pi
            s, c = np.zeros((n, dim)), np.zeros((n, dim))
            s[:, a] = freq * np.cos(freq * points[:, a])
            c[:, a] = -freq * np.sin(freq * points[:, a])
            parts.extend([s, c])
        columns.append(np.concatenate(parts, axis=1) if parts else np.zeros((n, 0)))
    return columns


def encode_nodes(graph: DiffGraph, x: int, cfg: PositionalEncodingConfig) -> int:
    """Graph version of `positional_encode` for inputs that carry gradients."""
    parts = [x] if cfg.include_input else []
    for k in range(cfg.num_frequencies):
        arg = graph.affine(x, scale=(2.0 ** k) * math.pi)
        parts.append(graph.sin(arg))
        parts.append(graph.cos(arg))
    return graph.concat(parts)


# ---------- Initialization ----------

def init_fields(seed: int, cfg: Optional[FieldConfig] = None) -> Tuple[FieldNetwork, FieldNetwork, FieldNetwork]:
    """
    Build (geometry, material, light), deterministic in `seed`.
    - geometry: sphere init, f(x) ~ |x| - init_radius
    - material / light: fan-in scaled normal weights, zero biases
    """
    cfg = cfg or FieldConfig()
    geo_seq, mat_seq, light_seq = np.random.SeedSequence(seed).spawn(3)

    geometry = FieldNetwork(
        kind="geometry",
        widths=[cfg.geometry_width] * cfg.geometry_layers,
        encoding=PositionalEncodingConfig(cfg.geometry_frequencies, cfg.include_input),
        activation="softplus",
        heads={"sdf": (0, 1, "identity")},
        skip_layer=cfg.skip_layer,
        softplus_beta=cfg.softplus_beta,
    )
    _geometric_init(geometry, np.random.default_rng(geo_seq), cfg.init_radius)

    material = FieldNetwork(
        kind="material",
        widths=[cfg.material_width] * cfg.material_layers,
        encoding=PositionalEncodingConfig(cfg.material_frequencies, cfg.include_input),
        activation="relu",
        heads={"albedo": (0, 3, "sigmoid"), "roughness": (3, 4, "sigmoid_clamp"), "metallic": (4, 5, "sigmoid")},
        skip_layer=cfg.skip_layer,
    )
    _fan_in_init(material, np.random.default_rng(mat_seq))

    light = FieldNetwork(
        kind="light",
        widths=[cfg.light_width] * cfg.light_layers if cfg.light_model == "mlp" else [],
        encoding=PositionalEncodingConfig(cfg.light_frequencies, cfg.include_input),
        activation="relu",
        heads={"radiance": (0, 3, "softplus")},
        skip_layer=cfg.skip_layer,
        model=cfg.light_model,
    )
    if cfg.light_model == "sh9":
        rng = np.random.default_rng(light_seq)
        light.params["light.sh"] = rng.normal(0.0, 0.1, size=(9, 3))
    else:
        _fan_in_init(light, np.random.default_rng(light_seq))

    logger.debug("init_fields: seed %d, %d/%d/%d parameters", seed,
                 count_parameters(geometry), count_parameters(material), count_parameters(light))
    return geometry, material, light


def _layer_shapes(net: FieldNetwork) -> List[Tuple[int, int]]:
    """(fan_in, fan_out) per linear layer, output layer last."""
    enc_dim = net.encoding.output_dim(3)
    shapes, width_in = [], enc_dim
    for i, width in enumerate(net.widths):
        if i == net.skip_layer and net.has_skip():
            width_in += enc_dim
        shapes.append((width_in, width))
        width_in = width
    shapes.append((width_in, net.output_dim))
    return shapes


def _geometric_init(net: FieldNetwork, rng: np.random.Generator, radius: float) -> None:
    enc_dim = net.encoding.output_dim(3)
    xyz_rows = 3 if net.encoding.include_input else 0
    shapes = _layer_shapes(net)
    for i, (fan_in, fan_out) in enumerate(shapes):
        name_w, name_b = f"geometry.w{i}", f"geometry.b{i}"
        if i == len(shapes) - 1:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4, size=(fan_in, fan_out))
            b = np.full(fan_out, -radius)
        else:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(fan_out), size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == 0:
                w[xyz_rows:, :] = 0.0
            elif i == net.skip_layer and net.has_skip():
                # rows for the re-injected encoding, minus its raw xyz part
                w[fan_in - enc_dim + xyz_rows:, :] = 0.0
        net.params[name_w] = w
        net.params[name_b] = b


def _fan_in_init(net: FieldNetwork, rng: np.random.Generator) -> None:
    shapes = _layer_shapes(net)
    for i, (fan_in, fan_out) in enumerate(shapes):
        gain = 1.0 if i == len(shapes) - 1 else 2.0
        net.params[f"{net.kind}.w{i}"] = rng.normal(0.0, math.sqrt(gain / fan_in), size=(fan_in, fan_out))
        net.params[f"{net.kind}.b{i}"] = np.zeros(fan_out)


def zero_output_layer(net: FieldNetwork) -> None:
    """Zero the final linear layer (raw outputs become 0 everywhere)."""
    if net.model == "sh9":
        net.params["light.sh"][...] = 0.0
        return
    last = net.num_layers
    net.params[f"{net.kind}.w{last}"][...] = 0.0
    net.params[f"{net.kind}.b{last}"][...] = 0.0


def count_parameters(net: FieldNetwork) -> int:
    return int(sum(v.size for v in net.params.values()))


def all_parameters(geometry: FieldNetwork, material: FieldNetwork, light: FieldNetwork,
                   log_kappa: float) -> Dict[str, np.ndarray]:
    """Flat name -> array table in a fixed order (the optimizer's view)."""
    table: Dict[str, np.ndarray] = {}
    for net in (geometry, material, light):
        for name in sorted(net.params):
            table[name] = net.params[name]
    table[IDS.LOG_KAPPA] = np.array([float(log_kappa)])
    return table


# ---------- Queries ----------

def geometry_query(net, x: np.ndarray) -> GeometrySample:
    """
    SDF, gradient and normal at points x (3,) or (N, 3).
    Normals with gradient norm below 1e-9 are zeroed and flagged invalid.
    """
    sdf, grad = net.sdf_and_gradient(_as_points(x))
    norm = np.linalg.norm(grad, axis=1)
    valid = norm > NORMAL_EPS
    normal = np.zeros_like(grad)
    normal[valid] = grad[valid] / norm[valid, None]
    return GeometrySample(sdf=sdf, gradient=grad, normal=normal, valid=valid)


def material_query(net, x: np.ndarray) -> PBRSample:
    return net.material(_as_points(x))


def light_query(net, omega: np.ndarray) -> np.ndarray:
    """Radiance for unit direction(s); a norm off by more than 1e-6 is rejected."""
    dirs = _as_points(omega)
    norms = np.linalg.norm(dirs, axis=1)
    bad = np.abs(norms - 1.0) > UNIT_TOLERANCE
    if np.any(bad):
        raise ValueError(f"light_query: direction norm {norms[bad][0]:.6f} is not 1 (tolerance {UNIT_TOLERANCE})")
    return net.radiance(dirs)


def _as_points(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3) or (3,), got {np.shape(x)}")
    return arr
