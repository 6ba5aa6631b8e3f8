"""Single-file tensor container shared by checkpoints and exported subnets.

Layout::

    b"MPSNTNSR" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | pad | blob

The manifest lists every array as ``{name, dtype, shape, offset, nbytes}``
with offsets relative to the 8-byte-aligned blob start. Arrays are stored
little-endian as ``<f4`` or ``<i4``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MPSNTNSR"
VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


class ContainerError(RuntimeError):
    pass


def write_container(path, arrays: dict[str, np.ndarray], meta: dict, kind: str) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = "<i4" if np.issubdtype(arr.dtype, np.integer) else "<f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        pad = (-len(raw)) % 8
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    manifest = json.dumps({"version": VERSION, "kind": kind, "meta": meta, "tensors": entries},
                          sort_keys=True).encode()
    head = MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest
    head += b"\0" * ((-len(head)) % 8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container")
    version, mlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = 20
    manifest = json.loads(buf[start:start + mlen])
    if kind is not None and manifest["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind!r} file, found {manifest['kind']!r}")
    blob = start + mlen
    blob += (-blob) % 8
    arrays = {}
    for e in manifest["tensors"]:
        lo = blob + e["offset"]
        arr = np.frombuffer(buf[lo:lo + e["nbytes"]], dtype=_DTYPES[e["dtype"]])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(_DTYPES[e["dtype"]].newbyteorder("="))
    return arrays, manifest["meta"]
