"""COST binary tensor format and manifest-based tensor bundles.

Layout of a single tensor file (all integers little-endian)::

    b"COST" | u16 version | u8 dtype tag (0=f32, 1=f64) | u8 rank | rank x u64 dims | raw data
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"COST"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


class HashMismatch(IOError):
    pass


def tensor_to_bytes(arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64")
    header = MAGIC + struct.pack("<HBB", VERSION, _TAGS[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_from_bytes(buf):
    if buf[:4] != MAGIC:
        raise FormatError("bad magic; not a COST tensor")
    version, tag, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    offset = 8 + 8 * rank
    dtype = _DTYPES[tag]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - offset != count * dtype.itemsize:
        raise FormatError("payload length does not match header")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path, arr):
    data = tensor_to_bytes(arr)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_tensor(path, expected_sha256=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if expected_sha256 is not None and hashlib.sha256(data).hexdigest() != expected_sha256:
        raise HashMismatch(f"{path}: content hash does not match manifest")
    return tensor_from_bytes(data)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_bundle(directory, tensors, roles=None, meta=None):
    """Write ``{name: array}`` as COST files plus ``manifest.json``.

    ``roles`` maps tensor name to a role string (e.g. ``"shared_kernel"``);
    ``meta`` is any JSON-serialisable payload stored alongside.
    """
    os.makedirs(os.path.join(directory, "tensors"), exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(tensors.items()):
        rel = os.path.join("tensors", f"{i:04d}.cost")
        digest = save_tensor(os.path.join(directory, rel), arr)
        entries.append({
            "name": name,
            "role": (roles or {}).get(name, ""),
            "file": rel,
            "shape": list(np.shape(arr)),
            "dtype": str(np.asarray(arr).dtype),
            "sha256": digest,
        })
    manifest = {"format": "COST", "version": VERSION, "tensors": entries, "meta": meta or {}}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_bundle(directory):
    """Inverse of :func:`save_bundle`; returns ``(tensors, roles, meta)``."""
    path = os.path.join(directory, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    tensors, roles = {}, {}
    for e in manifest["tensors"]:
        tensors[e["name"]] = load_tensor(os.path.join(directory, e["file"]), e["sha256"])
        roles[e["name"]] = e["role"]
    return tensors, roles, manifest.get("meta", {})
