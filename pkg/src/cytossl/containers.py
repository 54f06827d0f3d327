"""Portable on-disk tensor containers.

A container is a human-readable JSON manifest next to a raw blob of 32-bit
little-endian IEEE-754 floats in row-major order. Metadata stays greppable
while the payload round-trips bit-exactly. The same layout backs the patch
feature store, persisted model weights, and training checkpoints.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

CONTAINER_VERSION = 1
BLOB_SUFFIX = ".f32"
MANIFEST_SUFFIX = ".manifest.json"

_F32LE = np.dtype("<f4")


class ContainerError(ValueError):
    """Malformed or inconsistent container on disk."""


def atomic_write_bytes(path: Path | str, payload: bytes) -> None:
    """Write bytes to a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path | str, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def as_f32(array) -> np.ndarray:
    """Coerce to contiguous little-endian float32, rejecting non-finite-unfriendly input."""
    out = np.ascontiguousarray(np.asarray(array), dtype=_F32LE)
    return out


def blob_paths(prefix: Path | str) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_name(prefix.name + MANIFEST_SUFFIX), prefix.with_name(prefix.name + BLOB_SUFFIX)


def write_container(prefix: Path | str, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write named float32 tensors as ``<prefix>.manifest.json`` + ``<prefix>.f32``.

    Tensor order in the blob follows the mapping's insertion order. Both files
    are written atomically (temp file + rename).
    """
    manifest_path, blob_path = blob_paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        arr = as_f32(array)
        entries.append(
            {
                "name": str(name),
                "shape": [int(s) for s in arr.shape],
                "offset_bytes": offset,
                "numel": int(arr.size),
            }
        )
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size * 4

    manifest = {
        "version": CONTAINER_VERSION,
        "dtype": "float32-le",
        "total_bytes": offset,
        "tensors": entries,
        "extra": extra if extra is not None else {},
    }
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_json(manifest_path, manifest)


def read_container(prefix: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back as ``(name -> float32 array, extra)``.

    Raises ContainerError on unknown versions or when the blob length does not
    match the manifest.
    """
    manifest_path, blob_path = blob_paths(prefix)
    if not manifest_path.exists():
        raise ContainerError(f"missing manifest: {manifest_path}")
    if not blob_path.exists():
        raise ContainerError(f"missing blob: {blob_path}")

    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("version")
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unknown container version: {version!r}")

    raw = blob_path.read_bytes()
    expected = int(manifest.get("total_bytes", -1))
    if len(raw) != expected:
        raise ContainerError(
            f"blob length {len(raw)} bytes does not match manifest total {expected} bytes"
        )

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        numel = int(entry["numel"])
        offset = int(entry["offset_bytes"])
        if numel != int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"tensor {name!r}: numel {numel} inconsistent with shape {shape}")
        end = offset + numel * 4
        if end > len(raw):
            raise ContainerError(f"tensor {name!r}: blob truncated ({end} > {len(raw)} bytes)")
        flat = np.frombuffer(raw, dtype=_F32LE, count=numel, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
    return tensors, manifest.get("extra", {})
