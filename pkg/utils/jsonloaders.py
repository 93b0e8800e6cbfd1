import json
from pathlib import Path
from typing import Any, Dict, List, Union

PathLike = Union[str, Path]

# Top-level blocks a run config may carry
RUN_CONFIG_BLOCKS = ("training", "oracle", "eval", "paths", "seed", "threads")


# ------ Public API ------
def load_json(path: PathLike) -> Any:
    """
    Read a JSON document from disk.
    Raises ValueError naming the file on a missing file or invalid JSON.
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"Missing JSON file: {path}")

    # utf-8-sig tolerates a BOM
    text = path.read_text(encoding="utf-8-sig")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in {path}: {e.msg} (line {e.lineno}, column {e.colno})")


def write_json(path: PathLike, obj: Any) -> None:
    """Deterministic JSON: sorted keys, two-space indent, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj, indent=2) + "\n", encoding="utf-8")


def canonical_json(obj: Any, indent: Union[int, None] = None) -> str:
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(obj, sort_keys=True, indent=indent, separators=separators)


def load_run_config(path: PathLike) -> Dict[str, Any]:
    """
    Load a run config: one JSON object whose top-level keys are config blocks.
    - Unknown top-level blocks are rejected
    - Block contents are validated later by the dataclass that owns them
    """
    obj = load_json(path)
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: run config must be a JSON object")
    unknown = sorted(set(obj) - set(RUN_CONFIG_BLOCKS))
    if unknown:
        raise ValueError(f"{path}: unknown config key(s): {', '.join(unknown)}")
    return obj


def load_camera_records(path: PathLike) -> Dict[str, Any]:
    """
    Read cameras.json and check its record structure (not its geometry).
    Each view needs: index, intrinsics[4], extrinsics[12], resolution[2].
    """
    obj = load_json(path)
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: camera file must be a JSON object")
    for key in ("t_near", "t_far", "views"):
        if key not in obj:
            raise ValueError(f"{path}: missing '{key}'")
    views = obj["views"]
    if not isinstance(views, list) or not views:
        raise ValueError(f"{path}: 'views' must be a non-empty list")

    for pos, view in enumerate(views):
        _check_view_record(path, pos, view)
    return obj


# --- Internal helpers ---
def _check_view_record(path: PathLike, pos: int, view: Any) -> None:
    """Raise ValueError naming the file and view on a malformed record."""
    if not isinstance(view, dict):
        raise ValueError(f"{path}: view #{pos} is not an object")
    label = f"view {view.get('index', pos)}"
    expected = {"intrinsics": 4, "extrinsics": 12, "resolution": 2}
    for key, length in expected.items():
        value = view.get(key)
        if not _is_number_list(value, length):
            raise ValueError(f"{path}: {label} field '{key}' must be a list of {length} numbers")
    if "index" not in view or not isinstance(view["index"], int):
        raise ValueError(f"{path}: view #{pos} needs an integer 'index'")


def _is_number_list(value: Any, length: int) -> bool:
    if not isinstance(value, list) or len(value) != length:
        return False
    return all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)


def number_list(values: List[float]) -> List[float]:
    """Plain float list for JSON output."""
    return [float(v) for v in values]
