"""Writers for the two cross-tool file formats, implemented here
independently of the consumer.

NRE1 news-embedding store (little-endian):
    magic b"NRE1", u32 count, u32 dim,
    per record: u16 id byte length, UTF-8 news id, dim * f32
Provenance (model id, pooling, prompt hash) goes into a companion
``<path>.meta.json``; the binary layout itself carries none.

NTC1 named-tensor container (little-endian):
    magic b"NTC1", u32 version (1), u32 tensor count,
    per tensor: u16 name length, UTF-8 name, u8 ndim, u32*ndim dims,
    f64 data row-major.

Files are written to a temp path in the target directory and renamed into
place, so a crashed export never leaves a half-written store.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

NRE_MAGIC = b"NRE1"
NTC_MAGIC = b"NTC1"
NTC_VERSION = 1


def _atomic_write(path, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_embedding_store(path, vectors, dim, tag=None):
    """vectors: mapping news_id -> float array of length dim (stored f32)."""
    if not vectors:
        raise ValueError("refusing to write an empty store")
    parts = [NRE_MAGIC, struct.pack("<II", len(vectors), dim)]
    for news_id, vec in vectors.items():
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise ValueError(f"{news_id}: vector shape {vec.shape} != ({dim},)")
        idb = news_id.encode("utf-8")
        parts.append(struct.pack("<H", len(idb)))
        parts.append(idb)
        parts.append(vec.tobytes())
    _atomic_write(path, b"".join(parts))
    if tag:
        _atomic_write(str(path) + ".meta.json",
                      json.dumps(tag, indent=2, sort_keys=True).encode("utf-8"))


def write_tensor_container(path, tensors):
    """tensors: mapping name -> array; stored as f64 in insertion order."""
    parts = [NTC_MAGIC, struct.pack("<II", NTC_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))
