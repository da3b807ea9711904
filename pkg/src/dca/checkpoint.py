"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"DCACKPT1"
    8 bytes   uint64 manifest length N
    N bytes   UTF-8 JSON manifest
    ...       raw little-endian float64 buffers, back to back

The manifest holds ``{"version": 1, "meta": {...}, "sha256": hex,
"entries": [{"name", "shape", "offset"}]}`` where ``offset`` counts bytes
from the start of the buffer region and ``sha256`` covers that region.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DCACKPT1"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    body = b"".join(blobs)
    manifest = {"version": VERSION, "meta": meta or {}, "sha256": hashlib.sha256(body).hexdigest(),
                "entries": entries}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(body)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read and fully verify a checkpoint; nothing is returned on any error."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    body = raw[16 + n:]
    if hashlib.sha256(body).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(body):
            raise CheckpointError(f"{path}: entry {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(body[start:stop], dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, manifest["meta"]
