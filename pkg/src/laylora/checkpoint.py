"""Checkpoint directories: ``manifest.json`` plus one raw blob per parameter.

Byte layout: each blob is the parameter in row-major (C) order, little-endian,
either IEEE-754 float32 (``"<f4"``, the default for exported weights) or
float64 (``"<f8"``, used for exact training-state snapshots). The manifest
lists, in order, every parameter's ``name``, ``shape``, ``dtype`` and ``file``
together with a free-form ``meta`` object.
"""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IngestionError

MANIFEST = "manifest.json"
FORMAT = "laylora-checkpoint"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _blob_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None,
                dtype: str = "float32") -> Path:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPES[dtype])
        fname = _blob_name(name)
        (root / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "file": fname})
    manifest = {"format": FORMAT, "version": 1, "meta": meta or {}, "params": entries}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise IngestionError(f"no checkpoint manifest in {root}") from exc
    if manifest.get("format") != FORMAT:
        raise IngestionError(f"{root} is not a {FORMAT} directory")
    arrays = {}
    for entry in manifest["params"]:
        raw = (root / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).astype(np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise IngestionError(f"blob {entry['file']} does not match shape {shape}")
        arrays[entry["name"]] = arr.reshape(shape)
    return arrays, manifest.get("meta", {})
