from __future__ import annotations

import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union, get_args, get_origin, get_type_hints

import imageio.v3 as iio
import numpy as np

from utils.ids import IDS

T = TypeVar("T")
PathLike = Union[str, Path]

# ---------- Logging ----------

def configure_logging(verbose: bool = False) -> None:
    """Bracketed-tag console logging: `[train] message`."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(name)s] %(message)s",
        stream=sys.stderr,
        force=True,
    )


def resolve_threads(flag: Optional[int]) -> int:
    """`--threads` wins, then the environment variable, then 1."""
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get(IDS.THREADS_ENV, "").strip()
        if not raw:
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"{IDS.THREADS_ENV} must be an integer, got '{raw}'")
    if value < 1:
        raise ValueError(f"thread count must be >= 1, got {value}")
    return value


# ---------- Images ----------

def read_image(path: PathLike) -> np.ndarray:
    """
    Read an 8- or 16-bit PNG into float64 values in [0, 1].
    - Gray images come back as (H, W); RGB(A) as (H, W, 3)
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"Missing image file: {path}")
    raw = iio.imread(path)
    if raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
    else:
        raise ValueError(f"{path}: unsupported pixel type {raw.dtype} (expected 8- or 16-bit PNG)")
    if data.ndim == 3:
        data = data[..., :3]
    return data


def write_image(path: PathLike, image: np.ndarray, bits: int = 8, srgb: bool = False) -> None:
    """Quantize [0, 1] values to an 8/16-bit PNG; `srgb` applies gamma 2.2 first."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if srgb:
        data = linear_to_srgb(data)
    peak = 255.0 if bits == 8 else 65535.0
    dtype = np.uint8 if bits == 8 else np.uint16
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    iio.imwrite(path, np.round(data * peak).astype(dtype))


def linear_to_srgb(image: np.ndarray) -> np.ndarray:
    return np.power(np.clip(image, 0.0, 1.0), 1.0 / 2.2)


# ---------- PFM ----------

def write_pfm(path: PathLike, image: np.ndarray) -> None:
    """Little-endian color PFM; rows stored bottom to top."""
    data = np.asarray(image, dtype="<f4")
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PFM writer expects an (H, W, 3) array, got {data.shape}")
    height, width = data.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"PF\n{width} {height}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    """Read a color PFM into an (H, W, 3) float64 array, top row first."""
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"Missing PFM file: {path}")
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"PF":
            raise ValueError(f"{path}: not a color PFM (header {header!r})")
        dims = fh.readline().split()
        scale = float(fh.readline().strip())
        payload = fh.read()
    try:
        width, height = int(dims[0]), int(dims[1])
    except (IndexError, ValueError):
        raise ValueError(f"{path}: malformed PFM dimensions {dims!r}")
    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * 3 * 4
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated PFM ({len(payload)} of {expected} bytes)")
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width, 3)
    return data[::-1].astype(np.float64)


# ---------- Dataclass configs ----------

def dataclass_from_dict(cls: Type[T], data: Optional[Dict[str, Any]], path: str = "") -> T:
    """
    Build a (possibly nested) dataclass from a plain dict.
    - Unknown keys raise ValueError with their dotted path
    - Missing keys keep the dataclass defaults
    - Lists become tuples where the field is annotated as a tuple
    """
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"Config block '{path or cls.__name__}' must be an object, got {type(data).__name__}")

    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ValueError(f"Unknown config key(s): {', '.join(where + k for k in unknown)}")

    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    return cls(**kwargs)


def dataclass_to_dict(obj: Any) -> Dict[str, Any]:
    """Plain JSON-ready dict of a dataclass (tuples become lists)."""
    return _plain(dataclasses.asdict(obj))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(hint: Any, value: Any, path: str) -> Any:
    origin = get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return dataclass_from_dict(hint, value, path)
    if origin is Union:
        inner = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(inner[0], value, path) if len(inner) == 1 else value
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    return value
