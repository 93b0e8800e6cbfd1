"""
Checkpoint archives.

An archive is an uncompressed zip of `.npy` members (readable with `np.load`):
- param/<name>, adam_m/<name>, adam_v/<name>: little-endian float64 arrays
- meta/iteration, meta/adam_t, meta/seed, meta/format_version: int64 scalars
- meta/config_json, meta/config_hash: strings

Members are written in sorted order with a fixed timestamp, so identical state
gives byte-identical files. Writes go to a temporary file and are renamed into place.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import re
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import numpy as np

from services.optimizer import AdamState
from utils.ids import IDS
from utils.jsonloaders import canonical_json

logger = logging.getLogger("checkpoint")

# ---- SETTINGS ----
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
# config keys that change scheduling or bookkeeping, never the trajectory
HASH_EXCLUDED_KEYS = ("checkpoint_interval", "log_interval", "threads")


class CheckpointError(ValueError):
    """Corrupt, truncated, incompatible or mismatched checkpoint."""


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    adam: AdamState
    iteration: int
    seed: int
    config: Dict[str, Any]
    config_hash: str


def config_hash(config: Dict[str, Any], excluded: Iterable[str] = HASH_EXCLUDED_KEYS) -> str:
    """sha256 of the canonical JSON of `config` without the bookkeeping keys."""
    trimmed = {k: v for k, v in config.items() if k not in set(excluded)}
    return hashlib.sha256(canonical_json(trimmed).encode("utf-8")).hexdigest()


# ---------- Writing ----------

def save_checkpoint(path: Union[str, Path], params: Dict[str, np.ndarray], adam: AdamState, iteration: int,
                    seed: int, config: Dict[str, Any]) -> Path:
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        arrays[IDS.KEY_PARAM + name] = np.asarray(value, dtype="<f8")
        arrays[IDS.KEY_ADAM_M + name] = np.asarray(adam.m.get(name, np.zeros_like(value)), dtype="<f8")
        arrays[IDS.KEY_ADAM_V + name] = np.asarray(adam.v.get(name, np.zeros_like(value)), dtype="<f8")
    arrays[IDS.KEY_META + "iteration"] = np.array(int(iteration), dtype="<i8")
    arrays[IDS.KEY_META + "adam_t"] = np.array(int(adam.t), dtype="<i8")
    arrays[IDS.KEY_META + "seed"] = np.array(int(seed), dtype="<i8")
    arrays[IDS.KEY_META + "format_version"] = np.array(IDS.CHECKPOINT_FORMAT, dtype="<i8")
    arrays[IDS.KEY_META + "config_json"] = np.array(canonical_json(config))
    arrays[IDS.KEY_META + "config_hash"] = np.array(config_hash(config))

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_archive(path, arrays)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e.strerror or e}")
    logger.debug("saved checkpoint %s (iteration %d)", path, iteration)
    return path


def _write_archive(path: Path, arrays: Dict[str, np.ndarray]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(key + ".npy", date_time=ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


# ---------- Reading ----------

def load_checkpoint(path: Union[str, Path], expected_hash: Optional[str] = None,
                    force: bool = False) -> Checkpoint:
    """
    Read an archive completely before returning anything.
    - wrong format version or unreadable data -> CheckpointError
    - config hash differing from `expected_hash` -> warning, then CheckpointError unless `force`
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as e:
        raise CheckpointError(f"corrupt or truncated checkpoint {path}: {e}")

    def meta(key: str) -> np.ndarray:
        full = IDS.KEY_META + key
        if full not in arrays:
            raise CheckpointError(f"checkpoint {path} is missing '{full}'")
        return arrays[full]

    version = int(meta("format_version"))
    if version != IDS.CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {IDS.CHECKPOINT_FORMAT}")

    stored_hash = str(meta("config_hash"))
    if expected_hash is not None and stored_hash != expected_hash:
        logger.warning("checkpoint %s was written with a different config (hash %s..., expected %s...)",
                       path, stored_hash[:12], expected_hash[:12])
        if not force:
            raise CheckpointError(f"checkpoint {path} belongs to a different config; pass --force to load it anyway")

    params, m, v = {}, {}, {}
    for key, value in arrays.items():
        if key.startswith(IDS.KEY_PARAM):
            params[key[len(IDS.KEY_PARAM):]] = value.astype(np.float64)
        elif key.startswith(IDS.KEY_ADAM_M):
            m[key[len(IDS.KEY_ADAM_M):]] = value.astype(np.float64)
        elif key.startswith(IDS.KEY_ADAM_V):
            v[key[len(IDS.KEY_ADAM_V):]] = value.astype(np.float64)
    if not params:
        raise CheckpointError(f"checkpoint {path} holds no parameters")

    return Checkpoint(
        params=params,
        adam=AdamState(m=m, v=v, t=int(meta("adam_t"))),
        iteration=int(meta("iteration")),
        seed=int(meta("seed")),
        config=json.loads(str(meta("config_json"))),
        config_hash=stored_hash,
    )


def checkpoint_path(run_dir: Union[str, Path], iteration: int) -> Path:
    return Path(run_dir) / IDS.CHECKPOINT_DIR / (IDS.CHECKPOINT_PATTERN % iteration)


def latest_checkpoint(run_dir: Union[str, Path]) -> Optional[Path]:
    """Highest-numbered ckpt_XXXXXX.npz in the run directory, or None."""
    folder = Path(run_dir) / IDS.CHECKPOINT_DIR
    if not folder.is_dir():
        return None
    pattern = re.compile(r"ckpt_(\d+)\.npz$")
    found = [(int(m.group(1)), p) for p in folder.iterdir() if (m := pattern.match(p.name))]
    return max(found)[1] if found else None
