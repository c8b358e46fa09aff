"""Named-array checkpoint archives with content hashing.

Checkpoints across the package are .npz files holding float arrays plus a
JSON metadata record and a SHA-256 hash over the array contents. Loading
verifies the hash, so silent corruption surfaces as an error instead of
garbage weights.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import NumericsError


def _content_hash(arrays: dict) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode())
        arr = np.ascontiguousarray(arrays[name])
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def save_archive(path, arrays: dict, metadata: dict) -> None:
    """Write named arrays + metadata to ``path`` with an embedded hash."""
    payload = {f"array/{name}": np.asarray(value) for name, value in arrays.items()}
    payload["meta/json"] = np.frombuffer(
        json.dumps(metadata, sort_keys=True).encode(), dtype=np.uint8
    )
    payload["meta/hash"] = np.frombuffer(
        _content_hash({k: v for k, v in payload.items() if k.startswith("array/")}).encode(),
        dtype=np.uint8,
    )
    np.savez(path, **payload)


def load_archive(path) -> tuple[dict, dict]:
    """Read back ``(arrays, metadata)``; raises NumericsError on corruption."""
    with np.load(path) as data:
        payload = {name: data[name] for name in data.files}
    if "meta/hash" not in payload or "meta/json" not in payload:
        raise NumericsError(f"{path} is not a checkpoint archive")
    stored = payload.pop("meta/hash").tobytes().decode()
    metadata = json.loads(payload.pop("meta/json").tobytes().decode())
    if _content_hash(payload) != stored:
        raise NumericsError(f"checkpoint {path} failed its content-hash check")
    arrays = {name[len("array/"):]: value for name, value in payload.items()}
    return arrays, metadata
