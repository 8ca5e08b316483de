"""Self-describing tensor archive.

Layout::

    b"RGNFTCK1"                      8-byte magic
    <uint64 little-endian>           manifest length in bytes
    <manifest>                       UTF-8 JSON, sorted keys, no whitespace
    <payload>                        concatenated little-endian float64 data

The manifest lists every tensor as ``{"name", "shape", "offset", "nbytes"}``
(offsets relative to the payload start) plus a free-form ``meta`` object.
Writing the same tensors and metadata twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"RGNFTCK1"
FORMAT_VERSION = 1

_LE_F64 = np.dtype("<f8")


class CheckpointError(RuntimeError):
    pass


def _as_le_f64(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().to(torch.float64).numpy()
    return np.asarray(value, dtype=_LE_F64, order="C")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode_tensors(tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_le_f64(tensors[name])
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "rgnft-tensor-archive",
        "version": FORMAT_VERSION,
        "dtype": "float64-le",
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    head = canonical_json(manifest).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a tensor archive (bad magic)")
    (head_len,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + head_len].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported archive version {manifest.get('version')!r}")
    base = 16 + head_len
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_LE_F64).reshape(entry["shape"]).astype(np.float64)
        out[entry["name"]] = arr
    return out, manifest["meta"]


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    blob = encode_tensors(tensors, meta)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"failed to read checkpoint {path}: {exc}") from exc
    return decode_tensors(blob)


def tensor_digest(tensors: Mapping[str, Any]) -> str:
    """SHA-256 over names, shapes and float64 payloads (sorted by name)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _as_le_f64(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(canonical_json(list(arr.shape)).encode("ascii"))
        h.update(arr.tobytes(order="C"))
    return h.hexdigest()
