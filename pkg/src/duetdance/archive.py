"""Named-array archive: a directory with a JSON manifest plus one
little-endian, row-major binary payload per entry.

Used for checkpoints, feature statistics, dataset clips, and generated clips.
Roundtrips are bit-exact regardless of the host's endianness.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DuetError

MANIFEST_NAME = "manifest.json"

_DTYPES = {
    "f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "|u1",
}


@dataclass
class ArchiveManifest:
    format: str
    entries: list[dict]
    metadata: dict = field(default_factory=dict)


def _dtype_tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind + str(arr.dtype.itemsize)
    if kind not in _DTYPES:
        raise DuetError("unsupported-dtype", f"cannot archive dtype {arr.dtype}")
    return kind


def write_archive(path, entries: dict[str, np.ndarray], format_tag: str,
                  metadata: dict | None = None) -> None:
    """Write arrays under ``path``; entry names map to numbered payload files."""
    os.makedirs(path, exist_ok=True)
    manifest_entries = []
    for idx, (name, arr) in enumerate(entries.items()):
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        payload = np.ascontiguousarray(arr.astype(_DTYPES[tag], copy=False)).tobytes(order="C")
        fname = f"entry_{idx:04d}.bin"
        with open(os.path.join(path, fname), "wb") as f:
            f.write(payload)
        manifest_entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": tag,
            "file": fname,
            "nbytes": len(payload),
        })
    manifest = {
        "format": format_tag,
        "entries": manifest_entries,
        "metadata": metadata or {},
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_manifest(path) -> ArchiveManifest:
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise DuetError("corrupt-archive", f"no manifest at {path}")
    with open(mpath) as f:
        doc = json.load(f)
    names = [e["name"] for e in doc["entries"]]
    if len(set(names)) != len(names):
        raise DuetError("corrupt-archive", "duplicate entry names")
    return ArchiveManifest(format=doc["format"], entries=doc["entries"],
                           metadata=doc.get("metadata", {}))


def read_archive(path, expected_format: str | None = None
                 ) -> tuple[dict[str, np.ndarray], ArchiveManifest]:
    """Read all entries; verifies payload lengths and (optionally) the format tag."""
    manifest = read_manifest(path)
    if expected_format is not None and manifest.format != expected_format:
        raise DuetError("unsupported-format",
                        f"expected format {expected_format!r}, found {manifest.format!r}")
    entries = {}
    for e in manifest.entries:
        tag = e["dtype"]
        if tag not in _DTYPES:
            raise DuetError("unsupported-format", f"unknown dtype tag {tag!r}")
        fpath = os.path.join(path, e["file"])
        if not os.path.exists(fpath):
            raise DuetError("corrupt-archive", f"missing payload {e['file']}")
        with open(fpath, "rb") as f:
            payload = f.read()
        shape = tuple(e["shape"])
        expected_bytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[tag]).itemsize
        if len(payload) != expected_bytes or len(payload) != e["nbytes"]:
            raise DuetError("corrupt-archive",
                            f"entry {e['name']!r}: payload length mismatch")
        entries[e["name"]] = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(shape).copy()
    return entries, manifest


def archive_hash(path) -> str:
    """SHA-256 over the manifest and all payloads, stable across platforms."""
    h = hashlib.sha256()
    manifest = read_manifest(path)
    with open(os.path.join(path, MANIFEST_NAME), "rb") as f:
        h.update(f.read())
    for e in manifest.entries:
        with open(os.path.join(path, e["file"]), "rb") as f:
            h.update(f.read())
    return h.hexdigest()
