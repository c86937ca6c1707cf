"""Self-describing binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic  b"HYTCKPT1"
    8 bytes   uint64 header length in bytes
    N bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       raw tensor payloads, concatenated in header order

The header lists every tensor (name, shape, dtype, byte offset into the
payload region) plus a free-form ``meta`` dict for model/optimizer/run
metadata.  Writing is fully deterministic: identical tensors and metadata
produce identical bytes, which the determinism tests rely on.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"HYTCKPT1"
FORMAT_VERSION = 1

_DTYPE_TAGS = {"<f4": "<f4", "<f8": "<f8", "<i8": "<i8", "<i4": "<i4", "<u8": "<u8"}


class CheckpointError(Exception):
    pass


def _canonical(arr: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(arr)
    tag = a.dtype.newbyteorder("<").str
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported tensor dtype {a.dtype}")
    return a.astype(tag, copy=False)


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus metadata; overwrites ``path`` atomically."""
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        a = _canonical(tensors[name])
        raw = a.tobytes()
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "dtype": a.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "tensors": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(hbytes).to_bytes(8, "little"))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back ``(tensors, meta)``; validates magic and version."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        hlen = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        start = ent["offset"]
        end = start + ent["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {ent['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype=np.dtype(ent["dtype"]))
        tensors[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return tensors, header["meta"]
