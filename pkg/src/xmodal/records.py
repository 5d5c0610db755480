"""Raw little-endian array records with a JSON manifest.

Used by the embedding cache, noun-bank serialization, model checkpoints and
synthetic dataset files.  Each array lives in its own file; the manifest keeps
its dtype, shape and sha256 so corruption is detected on read.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CacheIntegrityError

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def _kind(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "f32"
    if np.issubdtype(arr.dtype, np.integer):
        return "i32"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def write_array(directory: Path, name: str, arr: np.ndarray) -> dict[str, Any]:
    """Write ``arr`` to ``directory/name.<kind>`` and return its manifest entry."""
    kind = _kind(arr)
    data = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
    directory.mkdir(parents=True, exist_ok=True)
    fname = f"{name}.{kind}"
    atomic_write_bytes(directory / fname, data)
    return {
        "file": fname,
        "dtype": kind,
        "shape": list(arr.shape),
        "sha256": hashlib.sha256(data).hexdigest(),
    }


def read_array(directory: Path, entry: dict[str, Any], key: str = "") -> np.ndarray:
    path = directory / entry["file"]
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CacheIntegrityError(key or entry["file"], "missing data file") from None
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise CacheIntegrityError(key or entry["file"], "checksum mismatch")
    dtype = _DTYPES[entry["dtype"]]
    shape = tuple(entry["shape"])
    if len(data) != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise CacheIntegrityError(key or entry["file"], "length mismatch")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def dump_json(path: Path, obj: Any) -> None:
    """Deterministic JSON (sorted keys, fixed indent)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_arrays(directory: Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Write a bundle of named arrays plus metadata under ``directory``."""
    directory = Path(directory)
    entries = {name: write_array(directory / "arrays", name, arr) for name, arr in arrays.items()}
    dump_json(directory / "manifest.json", {"meta": meta, "arrays": entries})
    return directory


def load_arrays(directory: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    manifest = load_json(directory / "manifest.json")
    arrays = {
        name: read_array(directory / "arrays", entry, key=name)
        for name, entry in manifest["arrays"].items()
    }
    return arrays, manifest["meta"]
