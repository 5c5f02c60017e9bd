"""
Flat binary feature cache.

Each array is stored as <name>.bin (raw C-order values) next to <name>.json:
    {"shape": [n, ...], "dtype": "float32", "layout": "C", "description": "..."}
The first axis is the record axis; writers append records, readers memory-map.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from app.core.errors import ContractError, FormatError, InputError

logger = logging.getLogger(__name__)


def _paths(root: Path, name: str) -> tuple[Path, Path]:
    return root / f"{name}.bin", root / f"{name}.json"


class ArrayWriter:
    """Appends fixed-shape records to <name>.bin; the descriptor is written on close."""

    def __init__(self, root: str | Path, name: str, record_shape: Sequence[int], dtype: str = "float32",
                 description: str = ""):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.name = name
        self.record_shape = tuple(int(s) for s in record_shape)
        self.dtype = np.dtype(dtype)
        self.description = description
        self.n_records = 0
        self._bin, self._meta = _paths(self.root, name)
        self._fh = open(self._bin, "wb")

    def append(self, records: np.ndarray) -> None:
        records = np.asarray(records, dtype=self.dtype)
        if records.shape[1:] != self.record_shape:
            raise ContractError(f"{self.name}: record shape {records.shape[1:]} != {self.record_shape}")
        np.ascontiguousarray(records).tofile(self._fh)
        self.n_records += records.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.close()
        descriptor = {
            "shape": [self.n_records, *self.record_shape],
            "dtype": self.dtype.name,
            "layout": "C",
            "description": self.description,
        }
        self._meta.write_text(json.dumps(descriptor, indent=2) + "\n", encoding="utf-8")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_array(root: str | Path, name: str, values: np.ndarray, description: str = "") -> None:
    values = np.asarray(values)
    with ArrayWriter(root, name, values.shape[1:], values.dtype.name, description) as w:
        w.append(values)


def load_array(root: str | Path, name: str, mmap: bool = True) -> np.ndarray:
    bin_path, meta_path = _paths(Path(root), name)
    if not meta_path.exists() or not bin_path.exists():
        raise InputError(f"feature cache entry {name} missing under {root}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        shape, dtype = tuple(meta["shape"]), np.dtype(meta["dtype"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad descriptor {meta_path}: {e}") from e
    if meta.get("layout", "C") != "C":
        raise FormatError(f"{meta_path}: only C layout is supported")

    expected = int(np.prod(shape)) * dtype.itemsize
    if bin_path.stat().st_size != expected:
        raise FormatError(f"{bin_path}: {bin_path.stat().st_size} bytes, descriptor implies {expected}")
    if expected == 0:
        return np.zeros(shape, dtype=dtype)
    if mmap:
        return np.memmap(bin_path, dtype=dtype, mode="r", shape=shape)
    return np.fromfile(bin_path, dtype=dtype).reshape(shape)


def has_array(root: str | Path, name: str) -> bool:
    bin_path, meta_path = _paths(Path(root), name)
    return bin_path.exists() and meta_path.exists()


def describe(root: str | Path, name: str) -> Optional[dict]:
    _, meta_path = _paths(Path(root), name)
    if not meta_path.exists():
        return None
    return json.loads(meta_path.read_text(encoding="utf-8"))
