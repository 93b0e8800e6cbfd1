# -------------------------------------------------------------------
# Shared plumbing for every command:
#   - run-config loading and flag overrides
#   - path checks done before any work starts
#   - parsing of small flag formats (resolution, vectors)
# -------------------------------------------------------------------

from __future__ import annotations
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from services.metrics import EvalConfig
from services.oracle import OracleRenderConfig
from services.trainer import TrainingConfig
from utils.helpers import dataclass_from_dict, resolve_threads
from utils.jsonloaders import load_run_config

PATH_KEYS = ("data", "out", "checkpoint")


# ---------- Config ----------
def load_config(args) -> Dict[str, Any]:
    """Run config from --config (empty when absent); the paths block is checked for unknown keys."""
    config = load_run_config(args.config) if getattr(args, "config", None) else {}
    paths = config.get("paths", {}) or {}
    if not isinstance(paths, dict):
        raise ValueError("config block 'paths' must be an object")
    unknown = sorted(set(paths) - set(PATH_KEYS))
    if unknown:
        raise ValueError(f"Unknown config key(s): {', '.join('paths.' + k for k in unknown)}")
    return config


def seed_of(args, config: Dict[str, Any]) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def threads_of(args, config: Dict[str, Any]) -> int:
    """--threads, then the config, then the environment variable, then 1."""
    flag = args.threads if args.threads is not None else config.get("threads")
    return resolve_threads(flag)


def training_config(args, config: Dict[str, Any]) -> TrainingConfig:
    cfg = TrainingConfig.from_dict(config.get("training"))
    cfg = replace(cfg, seed=seed_of(args, {"seed": cfg.seed, **config}))
    if getattr(args, "iterations", None) is not None:
        cfg = replace(cfg, iterations=int(args.iterations))
    return cfg


def oracle_config(config: Dict[str, Any]) -> OracleRenderConfig:
    return dataclass_from_dict(OracleRenderConfig, config.get("oracle"), "oracle")


def eval_config(config: Dict[str, Any]) -> EvalConfig:
    return EvalConfig.from_dict(config.get("eval"))


def path_arg(args, config: Dict[str, Any], key: str, required: bool = True) -> Optional[Path]:
    """--<key> flag, else paths.<key> from the config."""
    value = getattr(args, key, None) or (config.get("paths") or {}).get(key)
    if value is None and required:
        raise ValueError(f"missing --{key} (or paths.{key} in the config)")
    return Path(value) if value is not None else None


# ---------- Path checks ----------
def require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise ValueError(f"{what} directory not found: {path}")
    return path


def require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ValueError(f"{what} file not found: {path}")
    return path


def writable_dir(path: Path, what: str) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValueError(f"cannot create {what} directory {path}: {e.strerror or e}")
    return path


# ---------- Flag formats ----------
def parse_resolution(text: str) -> Tuple[int, int]:
    """'64' -> (64, 64); '80x60' -> (80, 60) as (width, height)."""
    parts = str(text).lower().split("x")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"resolution must look like 64 or 80x60, got '{text}'")
    if len(values) == 1:
        values = values * 2
    if len(values) != 2 or min(values) < 1:
        raise ValueError(f"resolution must look like 64 or 80x60, got '{text}'")
    return values[0], values[1]


def parse_floats(text: str, count: int, name: str) -> List[float]:
    try:
        values = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise ValueError(f"--{name} expects {count} comma-separated numbers, got '{text}'")
    if len(values) != count:
        raise ValueError(f"--{name} expects {count} comma-separated numbers, got {len(values)}")
    return values
