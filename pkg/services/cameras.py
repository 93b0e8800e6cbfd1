"""
Pinhole cameras, dataset ingestion and ray sampling.

Conventions (shared with the oracle renderer):
- camera frame: +x right, +y down, +z forward
- extrinsics are world-from-camera [R | t]; the camera center is t
- pixel (u, v) looks through its center: ((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1)
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from services.preprocess import PixelTable, build_pixel_table, preprocess_view
from utils.helpers import read_image
from utils.ids import IDS
from utils.jsonloaders import load_camera_records, number_list, write_json

logger = logging.getLogger("cameras")

# ---- SETTINGS ----
ORTHONORMAL_TOL = 1e-6
DEFAULT_UP = (0.0, 1.0, 0.0)
FALLBACK_UP = (0.0, 0.0, 1.0)


# ---- DOMAIN TYPES ----
@dataclass
class Camera:
    intrinsics: Tuple[float, float, float, float]   # fx, fy, cx, cy
    rotation: np.ndarray                             # (3, 3) world-from-camera
    translation: np.ndarray                          # (3,) camera center in world
    resolution: Tuple[int, int]                      # width, height

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.intrinsics = tuple(float(x) for x in self.intrinsics)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        validate_camera(self)

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def to_record(self, index: int) -> dict:
        extrinsics = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "index": int(index),
            "intrinsics": number_list(self.intrinsics),
            "extrinsics": number_list(extrinsics.reshape(-1)),
            "resolution": [self.width, self.height],
        }

    @classmethod
    def from_record(cls, record: dict) -> "Camera":
        ext = np.asarray(record["extrinsics"], dtype=np.float64).reshape(3, 4)
        return cls(intrinsics=tuple(record["intrinsics"]), rotation=ext[:, :3], translation=ext[:, 3],
                   resolution=tuple(record["resolution"]))

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) -> continuous pixel coordinates (N, 2) in the u + 0.5 convention."""
        fx, fy, cx, cy = self.intrinsics
        cam = (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation
        u = fx * cam[:, 0] / cam[:, 2] + cx - 0.5
        v = fy * cam[:, 1] / cam[:, 2] + cy - 0.5
        return np.stack([u, v], axis=1)


@dataclass
class View:
    index: int
    image: np.ndarray   # (H, W, 3) linear [0, 1]
    mask: np.ndarray    # (H, W) 0/1
    camera: Camera


@dataclass
class SceneDataset:
    views: List[View]
    t_near: float
    t_far: float
    path: Optional[Path] = None
    _pixels: Optional[PixelTable] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.t_near < self.t_far:
            raise ValueError(f"scene bounds need 0 < t_near < t_far, got t_near={self.t_near}, t_far={self.t_far}")
        if not self.views:
            raise ValueError("dataset has no views")
        resolutions = {v.camera.resolution for v in self.views}
        if len(resolutions) != 1:
            raise ValueError(f"all views must share one resolution, found {sorted(resolutions)}")

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.views[0].camera.resolution

    @property
    def pixels(self) -> PixelTable:
        if self._pixels is None:
            self._pixels = build_pixel_table([v.image for v in self.views], [v.mask for v in self.views])
        return self._pixels


@dataclass
class RayBundle:
    origins: np.ndarray      # (N, 3)
    directions: np.ndarray   # (N, 3)
    colors: np.ndarray       # (N, 3)
    masks: np.ndarray        # (N,)
    t: np.ndarray            # (N, S)
    deltas: np.ndarray       # (N, S)

    @property
    def num_rays(self) -> int:
        return self.origins.shape[0]

    @property
    def num_samples(self) -> int:
        return self.t.shape[1]

    @property
    def points(self) -> np.ndarray:
        """(N, S, 3) sample positions o + t d."""
        return self.origins[:, None, :] + self.t[..., None] * self.directions[:, None, :]

    def subset(self, rows: np.ndarray) -> "RayBundle":
        return RayBundle(self.origins[rows], self.directions[rows], self.colors[rows],
                         self.masks[rows], self.t[rows], self.deltas[rows])


# ---------- Validation ----------

def validate_camera(camera: Camera) -> None:
    fx, fy, cx, cy = camera.intrinsics
    width, height = camera.resolution
    if fx <= 0 or fy <= 0:
        raise ValueError(f"camera focal lengths must be positive, got fx={fx}, fy={fy}")
    if width < 1 or height < 1:
        raise ValueError(f"camera resolution must be positive, got {width}x{height}")
    if not (0 <= cx < width and 0 <= cy < height):
        raise ValueError(f"principal point ({cx}, {cy}) outside the {width}x{height} image")
    r = camera.rotation
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMAL_TOL or abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
        raise ValueError("camera rotation is not orthonormal with determinant +1")


# ---------- Ray generation ----------

def generate_ray(camera: Camera, pixel: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Origin and unit direction through continuous pixel coordinates (u, v)."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside the {camera.width}x{camera.height} image")
    origins, dirs = generate_rays(camera, np.array([u]), np.array([v]))
    return origins[0], dirs[0]


def generate_rays(camera: Camera, u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized `generate_ray` without bounds checks."""
    fx, fy, cx, cy = camera.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, np.ones_like(u)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.translation, d_world.shape).copy()
    return origins, d_world


def stratified_depths(n: int, samples: int, t_near: float, t_far: float,
                      jitter: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split [t_near, t_far] into `samples` equal bins with one depth per bin.
    - jitter (n, S) in [0, 1) places the depth inside its bin; None uses bin midpoints
    - deltas: t[j+1] - t[j], last one t_far - t[S-1]
    """
    width = (t_far - t_near) / samples
    offsets = np.full((n, samples), 0.5) if jitter is None else jitter
    t = t_near + (np.arange(samples)[None, :] + offsets) * width
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = t_far - t[:, -1]
    return t, deltas


def sample_ray_batch(ds: SceneDataset, n: int, samples: int, seed,
                     strata_seed=None) -> RayBundle:
    """
    Uniform pixels over all views plus stratified depths; deterministic in the seeds.
    `strata_seed` lets the trainer draw pixels and depth jitter from separate streams.
    """
    if n < 1:
        raise ValueError(f"ray batch size must be >= 1, got {n}")
    if samples < 2:
        raise ValueError(f"samples per ray must be >= 2, got {samples}")

    table = ds.pixels
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, len(table), size=n)
    strata_rng = rng if strata_seed is None else np.random.default_rng(strata_seed)
    jitter = strata_rng.random((n, samples))

    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    views = table.view[rows]
    for k in np.unique(views):
        sel = views == k
        o, d = generate_rays(ds.views[k].camera, table.u[rows[sel]], table.v[rows[sel]])
        origins[sel] = o
        dirs[sel] = d

    t, deltas = stratified_depths(n, samples, ds.t_near, ds.t_far, jitter)
    return RayBundle(origins, dirs, table.colors[rows].copy(), table.masks[rows].copy(), t, deltas)


def camera_bundle(camera: Camera, t_near: float, t_far: float, samples: int,
                  rows: Optional[np.ndarray] = None) -> RayBundle:
    """Every pixel (or the flat pixel `rows`) of one camera with midpoint depths; colors/masks zero."""
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    u, v = uu.reshape(-1), vv.reshape(-1)
    if rows is not None:
        u, v = u[rows], v[rows]
    origins, dirs = generate_rays(camera, u, v)
    n = len(u)
    t, deltas = stratified_depths(n, samples, t_near, t_far, None)
    return RayBundle(origins, dirs, np.zeros((n, 3)), np.zeros(n), t, deltas)


# ---------- Camera construction ----------

def intrinsics_from_fov(resolution: Tuple[int, int], fov_degrees: float) -> Tuple[float, float, float, float]:
    width, height = resolution
    focal = 0.5 * width / math.tan(math.radians(fov_degrees) / 2.0)
    return focal, focal, width / 2.0, height / 2.0


def look_at(eye: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0),
            up: Sequence[float] = DEFAULT_UP) -> np.ndarray:
    """World-from-camera rotation whose +z looks from `eye` to `target` (y down)."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    forward /= np.linalg.norm(forward)
    up_vec = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(forward, up_vec))) > 0.999:
        up_vec = np.asarray(FALLBACK_UP, dtype=np.float64)
    right = np.cross(forward, up_vec)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def orbit_cameras(n_views: int, radius: float, resolution: Tuple[int, int], fov_degrees: float,
                  seed: Optional[int] = None, jitter: float = 0.0) -> List[Camera]:
    """
    Cameras on a sphere looking at the origin.
    Fibonacci placement; optional seeded angular jitter of the positions.
    """
    rng = np.random.default_rng(seed)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    intr = intrinsics_from_fov(resolution, fov_degrees)
    cameras = []
    for i in range(n_views):
        y = 1.0 - 2.0 * (i + 0.5) / n_views
        ring = math.sqrt(max(0.0, 1.0 - y * y))
        phi = golden * i
        direction = np.array([ring * math.cos(phi), y, ring * math.sin(phi)])
        if jitter > 0:
            direction = direction + rng.normal(0.0, jitter, size=3)
            direction /= np.linalg.norm(direction)
        eye = radius * direction
        cameras.append(Camera(intr, look_at(eye), eye, resolution))
    return cameras


# ---------- Dataset I/O ----------

def load_dataset(path: Union[str, Path]) -> SceneDataset:
    """
    Load and validate a dataset directory.
    Errors name the file (and view) at fault.
    """
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"Dataset directory not found: {root}")
    cam_file = root / IDS.CAMERAS_JSON
    records = load_camera_records(cam_file)

    t_near, t_far = float(records["t_near"]), float(records["t_far"])
    if not 0.0 < t_near < t_far:
        raise ValueError(f"{cam_file}: need 0 < t_near < t_far, got t_near={t_near}, t_far={t_far}")

    views: List[View] = []
    for record in records["views"]:
        index = record["index"]
        try:
            camera = Camera.from_record(record)
        except ValueError as e:
            raise ValueError(f"{cam_file}: view {index}: {e}")
        image_file = root / IDS.IMAGES_DIR / (IDS.VIEW_PATTERN % index)
        mask_file = root / IDS.MASKS_DIR / (IDS.VIEW_PATTERN % index)
        if not image_file.is_file():
            raise ValueError(f"view {index}: missing image file {image_file}")
        if not mask_file.is_file():
            raise ValueError(f"view {index}: missing mask file {mask_file}")
        image, mask = preprocess_view(read_image(image_file), read_image(mask_file), camera.resolution,
                                      f"view {index} ({image_file.name})")
        views.append(View(index=index, image=image, mask=mask, camera=camera))

    ds = SceneDataset(views=views, t_near=t_near, t_far=t_far, path=root)
    logger.info("loaded %d views at %dx%d from %s", len(views), *ds.resolution, root)
    return ds


def write_cameras(path: Union[str, Path], cameras: List[Camera], t_near: float, t_far: float) -> None:
    write_json(path, {
        "format_version": IDS.DATASET_FORMAT,
        "t_near": float(t_near),
        "t_far": float(t_far),
        "views": [cam.to_record(i) for i, cam in enumerate(cameras)],
    })


def load_cameras(path: Union[str, Path]) -> Tuple[List[Camera], float, float]:
    """Cameras only (no images), from a cameras.json file or a dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / IDS.CAMERAS_JSON
    records = load_camera_records(path)
    cameras = [Camera.from_record(r) for r in records["views"]]
    return cameras, float(records["t_near"]), float(records["t_far"])
