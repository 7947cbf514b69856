"""Independent implementation of the DASR weight-container byte layout.

Deliberately written from the format description rather than shared with the
engine, so a round trip through both implementations cross-checks the format:

    magic "DASR" | version u32 LE | count u32 LE
    per tensor: name_len u32, name utf-8, rank u32, dims u32*rank,
                payload float32 LE row-major
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"DASR"
VERSION = 1


def write_tensors(path, tensors: dict[str, np.ndarray]) -> dict[str, str]:
    """Serialize tensors in dict order; returns per-tensor payload sha256."""
    checksums = {}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, array in tensors.items():
            data = np.ascontiguousarray(array, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            payload = data.tobytes()
            fh.write(payload)
            checksums[name] = hashlib.sha256(payload).hexdigest()
    return checksums


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = 4 * int(np.prod(dims))
        out[name] = np.frombuffer(blob[off:off + n], dtype="<f4").reshape(dims).copy()
        off += n
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes")
    return out
