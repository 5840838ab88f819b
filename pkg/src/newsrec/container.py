"""Named-tensor binary container for parameter checkpoints.

Layout (little-endian throughout):

    magic   b"NTC1"
    u32     format version (currently 1)
    u32     tensor count
    then per tensor:
        u16      name byte length, followed by UTF-8 name
        u8       ndim
        u32*ndim dims
        f64*prod data, row-major

Sidecar-exported transformer weights are written in this same layout
(upcast to 64-bit at write time), so the engine loads them unchanged.
"""

import struct

import numpy as np

MAGIC = b"NTC1"
VERSION = 1


class BadMagic(ValueError):
    pass


class UnsupportedVersion(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


def save_tensors(path, tensors):
    """Write {name: array} to ``path``; iteration order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_tensors(path):
    """Read a container back into {name: float64 array}."""
    with open(path, "rb") as f:
        raw = f.read()

    def take(n, offset):
        if offset + n > len(raw):
            raise TruncatedFile(f"{path}: need {offset + n} bytes, have {len(raw)}")
        return raw[offset:offset + n], offset + n

    head, off = take(4, 0)
    if head != MAGIC:
        raise BadMagic(f"{path}: magic {head!r}")
    (version, count), off = struct.unpack("<II", raw[4:12]), 12
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    out = {}
    for _ in range(count):
        b, off = take(2, off)
        (name_len,) = struct.unpack("<H", b)
        b, off = take(name_len, off)
        name = b.decode("utf-8")
        b, off = take(1, off)
        ndim = b[0]
        b, off = take(4 * ndim, off)
        shape = struct.unpack(f"<{ndim}I", b)
        size = int(np.prod(shape)) if ndim else 1
        b, off = take(8 * size, off)
        out[name] = np.frombuffer(b, dtype="<f8").reshape(shape).copy()
    return out
