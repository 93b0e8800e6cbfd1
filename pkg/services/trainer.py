"""
Training loop.

Per iteration:
1. derive four seeds from (seed, iteration): rays, depth strata, smoothness offsets, eikonal points
2. sample a ray batch and split it into `ray_chunks` fixed chunks
3. render + photometric/mask loss on one graph per chunk (threads optional)
4. priors (eikonal, material, light) on one more graph, reusing the batch's surface points
5. reduce the gradient tables in chunk order, then one Adam step over all fields and log kappa

Everything random is a function of (seed, iteration), so a resumed run
follows the uninterrupted trajectory exactly.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from services import checkpoint as ckpt_io
from services.autodiff import DiffGraph, backward
from services.cameras import RayBundle, SceneDataset, sample_ray_batch
from services.figures import build_loss_curves, write_figure
from services.fields import FieldConfig, FieldNetwork, all_parameters, geometry_query, init_fields
from services.losses import (
    LossBreakdown,
    LossWeights,
    eikonal_loss,
    eikonal_points,
    light_regularization,
    mask_loss,
    material_smoothness_loss,
    merge_breakdowns,
    metallic_sparsity_loss,
    photometric_loss,
    tangent_perturbations,
    total_loss,
)
from services.optimizer import AdamState, adam_step, lr_schedule
from services.renderer import render_rays
from services.shading import make_shading_fn
from utils.helpers import dataclass_from_dict, dataclass_to_dict
from utils.ids import IDS

logger = logging.getLogger("train")


# ---- CONFIG ----
@dataclass
class TrainingConfig:
    iterations: int = 5000
    batch_rays: int = 512
    samples: int = 64
    quadrature_k: int = 64
    lr: float = 5e-4
    decay: Optional[float] = None      # None: reach lr / 10 at the last iteration
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_interval: int = 500
    log_interval: int = 1
    ray_chunks: int = 4
    eikonal_points: int = 512
    light_reg_directions: int = 64
    scene_bound: float = 1.0
    init_kappa: float = 20.0
    shading_cutoff: float = 1e-3
    fields: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.decay is not None and not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {value}")
        for name in ("batch_rays", "checkpoint_interval", "log_interval", "ray_chunks", "eikonal_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.samples < 2:
            raise ValueError(f"samples must be >= 2, got {self.samples}")
        if self.lr <= 0 or self.eps <= 0 or self.init_kappa <= 0 or self.scene_bound <= 0:
            raise ValueError("lr, eps, init_kappa and scene_bound must be positive")
        if self.ray_chunks > self.batch_rays:
            raise ValueError(f"ray_chunks ({self.ray_chunks}) cannot exceed batch_rays ({self.batch_rays})")

    def to_dict(self) -> dict:
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "TrainingConfig":
        return dataclass_from_dict(cls, data, "training")


class TrainingDivergedError(RuntimeError):
    """A loss term or gradient went non-finite; `last_good.npz` holds the pre-step state."""


# ---- DOMAIN TYPES ----
@dataclass
class FieldSet:
    geometry: FieldNetwork
    material: FieldNetwork
    light: FieldNetwork

    def load(self, params: Dict[str, np.ndarray]) -> None:
        """Point every network at the arrays of the flat parameter table."""
        for net in (self.geometry, self.material, self.light):
            missing = [name for name in net.params if name not in params]
            if missing:
                raise ValueError(f"parameter table is missing {', '.join(sorted(missing)[:3])}")
            net.params = {name: params[name] for name in net.params}


@dataclass
class StepResult:
    grads: Dict[str, np.ndarray]
    breakdown: LossBreakdown
    hit_rays: int
    skipped_samples: int


@dataclass
class TrainResult:
    checkpoint: Path
    log: pd.DataFrame
    params: Dict[str, np.ndarray]


# ---------- Helpers ----------

def iteration_seeds(seed: int, iteration: int) -> List[np.random.SeedSequence]:
    """(rays, strata, smoothness, eikonal) streams for one iteration."""
    return np.random.SeedSequence(seed, spawn_key=(iteration,)).spawn(4)


def initial_state(cfg: TrainingConfig) -> Tuple[FieldSet, Dict[str, np.ndarray], AdamState]:
    fields = FieldSet(*init_fields(cfg.seed, cfg.fields))
    params = all_parameters(fields.geometry, fields.material, fields.light, math.log(cfg.init_kappa))
    return fields, params, AdamState.zeros_like(params)


def kappa_of(params: Dict[str, np.ndarray]) -> float:
    return float(np.exp(params[IDS.LOG_KAPPA][0]))


def _bind_all(graph: DiffGraph, fields: FieldSet, params: Dict[str, np.ndarray]):
    leaves: Dict[str, int] = {}
    geo = fields.geometry.bind(graph, True, leaves)
    mat = fields.material.bind(graph, True, leaves)
    light = fields.light.bind(graph, True, leaves)
    leaves[IDS.LOG_KAPPA] = graph.parameter(params[IDS.LOG_KAPPA])
    return geo, mat, light, leaves


def _leaf_grads(graph: DiffGraph, loss: int, leaves: Dict[str, int]) -> Dict[str, np.ndarray]:
    grads = backward(graph, loss, only_required=True, retain_intermediate=False)
    return {name: grads[nid] for name, nid in leaves.items() if nid in grads}


def _chunk_step(fields: FieldSet, params, bundle: RayBundle, cfg: TrainingConfig, n_total: int):
    graph = DiffGraph()
    geo, mat, light, leaves = _bind_all(graph, fields, params)
    kappa = graph.exp(leaves[IDS.LOG_KAPPA])
    out = render_rays(graph, bundle, geo, make_shading_fn(mat, light, cfg.quadrature_k), kappa, cfg.shading_cutoff)
    terms = {
        IDS.TERM_L1: photometric_loss(graph, out.color, bundle.colors, count=n_total),
        IDS.TERM_MASK: mask_loss(graph, out.opacity, bundle.masks, count=n_total),
    }
    total, breakdown = total_loss(graph, terms, cfg.weights)
    grads = _leaf_grads(graph, total, leaves)
    return grads, breakdown, out.surface_points[out.hit], out.skipped_invalid + out.skipped_backfacing


def _priors_step(fields: FieldSet, params, surface: np.ndarray, cfg: TrainingConfig,
                 smooth_seed, eik_seed):
    graph = DiffGraph()
    geo, mat, light, leaves = _bind_all(graph, fields, params)
    terms: Dict[str, int] = {}

    pts = eikonal_points(surface, cfg.eikonal_points, cfg.scene_bound, np.random.default_rng(eik_seed))
    _, grad = geo.sdf_nodes(graph, pts, True)
    terms[IDS.TERM_EIKONAL] = eikonal_loss(graph, graph.norm(grad))

    if len(surface):
        normals = geometry_query(fields.geometry, surface).normal
        offsets = tangent_perturbations(normals, len(surface), np.random.default_rng(smooth_seed))
        smooth, here = material_smoothness_loss(graph, surface, mat, offsets)
        terms[IDS.TERM_MAT] = smooth
        terms[IDS.TERM_METAL] = metallic_sparsity_loss(graph, here["metallic"])

    intensity, light_smooth = light_regularization(graph, light, cfg.light_reg_directions)
    terms[IDS.TERM_LIGHT_INT] = intensity
    terms[IDS.TERM_LIGHT_SMOOTH] = light_smooth

    total, breakdown = total_loss(graph, terms, cfg.weights)
    return _leaf_grads(graph, total, leaves), breakdown


def _reduce(tables: List[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for table in tables:
        for name, g in table.items():
            out[name] = g.copy() if name not in out else out[name] + g
    return out


def _non_finite(grads: Dict[str, np.ndarray]) -> Optional[str]:
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            return name
    return None


# ---- MAIN FUNCTIONS ----

def training_step(fields: FieldSet, params: Dict[str, np.ndarray], cfg: TrainingConfig, ds: SceneDataset,
                  iteration: int, pool: Optional[ThreadPoolExecutor] = None) -> StepResult:
    """Loss breakdown and summed gradients of one iteration's batch (no update)."""
    fields.load(params)
    ray_seed, strata_seed, smooth_seed, eik_seed = iteration_seeds(cfg.seed, iteration)
    bundle = sample_ray_batch(ds, cfg.batch_rays, cfg.samples, ray_seed, strata_seed)
    chunks = [bundle.subset(rows) for rows in np.array_split(np.arange(cfg.batch_rays), cfg.ray_chunks)]

    def run(chunk: RayBundle):
        return _chunk_step(fields, params, chunk, cfg, cfg.batch_rays)

    results = list(pool.map(run, chunks)) if pool is not None else [run(c) for c in chunks]

    surface = np.concatenate([r[2] for r in results]) if results else np.zeros((0, 3))
    prior_grads, prior_breakdown = _priors_step(fields, params, surface, cfg, smooth_seed, eik_seed)

    grads = _reduce([r[0] for r in results] + [prior_grads])
    breakdown = merge_breakdowns([r[1] for r in results] + [prior_breakdown], cfg.weights)
    skipped = int(sum(r[3] for r in results))
    if skipped:
        logger.debug("iteration %d: %d shading samples skipped (invalid or back-facing normals)", iteration, skipped)
    return StepResult(grads=grads, breakdown=breakdown, hit_rays=len(surface), skipped_samples=skipped)


def train(cfg: TrainingConfig, ds: SceneDataset, out_dir: Union[str, Path], resume: bool = False,
          force: bool = False, threads: int = 1) -> TrainResult:
    """
    Run (or continue) training into `out_dir`.
    Writes checkpoints/ckpt_XXXXXX.npz every `checkpoint_interval` iterations and at the end,
    one CSV row per `log_interval`, and loss_curves.html when done.
    """
    out = Path(out_dir)
    try:
        (out / IDS.CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValueError(f"cannot create run directory {out}: {e.strerror or e}")
    config = cfg.to_dict()
    expected_hash = ckpt_io.config_hash(config)
    log_path = out / IDS.TRAIN_LOG

    fields, params, adam = initial_state(cfg)
    start = 0
    if resume:
        latest = ckpt_io.latest_checkpoint(out)
        if latest is None:
            logger.warning("--resume: no checkpoint in %s, starting from scratch", out)
        else:
            state = ckpt_io.load_checkpoint(latest, expected_hash, force)
            params, adam, start = state.params, state.adam, state.iteration
            logger.info("resuming from %s at iteration %d", latest.name, start)
    _truncate_log(log_path, start)
    if start >= cfg.iterations:
        logger.info("nothing to do: checkpoint already at iteration %d of %d", start, cfg.iterations)

    pending: List[dict] = []
    last_ckpt = ckpt_io.checkpoint_path(out, start)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for it in tqdm(range(start, cfg.iterations), desc="train", disable=None, leave=False,
                       initial=start, total=cfg.iterations):
            lr = lr_schedule(it, cfg)
            step = training_step(fields, params, cfg, ds, it, pool)

            bad = None if step.breakdown.is_finite() else "loss"
            bad = bad or _non_finite(step.grads)
            if bad:
                good = ckpt_io.save_checkpoint(out / IDS.LAST_GOOD, params, adam, it, cfg.seed, config)
                _append_log(log_path, pending)
                raise TrainingDivergedError(
                    f"non-finite {'loss' if bad == 'loss' else 'gradient for ' + bad} at iteration {it}; "
                    f"pre-step state saved to {good}")

            row = {IDS.COL_ITERATION: it, **step.breakdown.as_row(), IDS.COL_LR: lr, IDS.COL_KAPPA: kappa_of(params)}
            params, adam = adam_step(params, step.grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps)

            done = it + 1
            if it % cfg.log_interval == 0 or done == cfg.iterations:
                pending.append(row)
                logger.info("it %d  total %.5f  l1 %.5f  kappa %.2f  lr %.2e  hits %d", it, row[IDS.COL_TOTAL],
                            row[IDS.TERM_L1], row[IDS.COL_KAPPA], lr, step.hit_rays)
            if done % cfg.checkpoint_interval == 0 or done == cfg.iterations:
                _append_log(log_path, pending)
                pending = []
                last_ckpt = ckpt_io.save_checkpoint(ckpt_io.checkpoint_path(out, done), params, adam, done,
                                                    cfg.seed, config)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    _append_log(log_path, pending)
    log = read_log(log_path)
    if not log.empty:
        write_figure(build_loss_curves(log), out / IDS.LOSS_CURVES_HTML)
    return TrainResult(checkpoint=last_ckpt, log=log, params=params)


# ---------- Training log ----------

def read_log(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        return pd.DataFrame(columns=list(IDS.LOG_COLUMNS))
    df = pd.read_csv(path)
    missing = [c for c in IDS.LOG_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path.name}: missing column(s) {', '.join(missing)}")
    return df


def _append_log(path: Path, rows: List[dict]) -> None:
    if not rows:
        return
    df = pd.DataFrame(rows, columns=list(IDS.LOG_COLUMNS))
    df.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.10g")


def _truncate_log(path: Path, start: int) -> None:
    """Drop rows at or past `start` (all rows when starting fresh)."""
    if not path.exists():
        return
    if start == 0:
        path.unlink()
        return
    df = read_log(path)
    df[df[IDS.COL_ITERATION] < start].to_csv(path, index=False, float_format="%.10g")


# ---------- Restoring trained fields ----------

@dataclass
class TrainedFields:
    fields: FieldSet
    kappa: float
    config: TrainingConfig
    iteration: int


def load_trained(path: Union[str, Path]) -> TrainedFields:
    """Rebuild the three networks and kappa from a checkpoint archive."""
    state = ckpt_io.load_checkpoint(path)
    cfg = TrainingConfig.from_dict(state.config)
    fields = FieldSet(*init_fields(cfg.seed, cfg.fields))
    fields.load(state.params)
    if IDS.LOG_KAPPA not in state.params:
        raise ckpt_io.CheckpointError(f"checkpoint {path} has no '{IDS.LOG_KAPPA}' parameter")
    return TrainedFields(fields=fields, kappa=kappa_of(state.params), config=cfg, iteration=state.iteration)
