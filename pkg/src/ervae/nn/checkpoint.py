"""Parameter checkpoints: a JSON manifest plus a sidecar of little-endian float64 data.

The manifest lists each tensor's name, shape and byte offset into the
sidecar; tensors are concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ervae.errors import CheckpointError

FORMAT_VERSION = 1


def save_checkpoint(path, arrays, metadata=None):
    """Write ``path`` (manifest) and ``path.with_suffix('.bin')``. Returns the manifest dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.nbytes
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float64-le",
        "data_file": bin_path.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "metadata": metadata or {},
    }
    bin_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(path, verify=True):
    """Return ``(arrays, metadata)``. Raises CheckpointError when the sidecar is missing or its hash is wrong."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    data_path = path.parent / manifest["data_file"]
    if not data_path.exists():
        raise CheckpointError(f"checkpoint data file {data_path} is missing")
    blob = data_path.read_bytes()
    if verify and hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"checkpoint data for {path} does not match its manifest hash")
    arrays = {}
    for e in manifest["tensors"]:
        a = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest.get("metadata", {})


def arrays_digest(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()
