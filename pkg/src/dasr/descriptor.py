"""Instance-level descriptors: region pooling and l2 -> whiten -> l2.

The descriptor store is a little-endian binary file:

    magic   4 bytes "DASD"
    version u32, flags u32 (bit 0: vectors are finalized), dim u32, count u32
    per record:
        image_id_len u32, image_id utf-8
        region_id u32, bbox 4 * i32 (top, left, bottom, right)
        vector dim * float32
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import nnops
from .errors import (
    BadMagicError,
    DataError,
    IOFormatError,
    TruncatedPayloadError,
    UnresolvedRefError,
    VersionMismatchError,
)
from .graph import ActivationCache, NetworkGraph

STORE_MAGIC = b"DASD"
STORE_VERSION = 1
_FINALIZED = 1


@dataclass
class Descriptor:
    vector: np.ndarray
    image_id: str
    region_id: int
    normalized: bool
    bbox: tuple[int, int, int, int] = (0, 0, 0, 0)


@dataclass(frozen=True)
class WhitenModel:
    """Centering + rotation to principal axes + inverse-stddev scaling.

    rotation columns are eigenvectors ordered by descending eigenvalue;
    apply() computes scale * rotation^T (v - mean).
    """

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.scale * (self.rotation.T @ (v - self.mean))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = math.sqrt(float(v @ v))
    return v / norm if norm > 0.0 else v


def pool_region(graph: NetworkGraph, cache: ActivationCache, tap: str,
                bbox: tuple[int, int, int, int]) -> np.ndarray:
    """Per-channel mean of the tap layer over an input-coordinate box.

    The box is projected onto the tap's grid by dividing by the cumulative
    stride, rounding outward (floor for top/left, ceil for bottom/right),
    then clamped to at least one cell.
    """
    if tap not in cache:
        raise UnresolvedRefError(f"tap layer {tap!r} not present in cache")
    fmap = cache[tap]
    fh, fw = fmap.shape[:2]
    sy, sx = graph.cumulative_stride(tap)
    top, left, bottom, right = bbox
    t = min(max(math.floor(top / sy), 0), fh - 1)
    l = min(max(math.floor(left / sx), 0), fw - 1)
    b = max(min(math.ceil(bottom / sy), fh), t + 1)
    r = max(min(math.ceil(right / sx), fw), l + 1)
    window = fmap[t:b, l:r, :].astype(np.float64)
    return window.mean(axis=(0, 1)).astype(nnops.FLOAT)


def fit_whitening(samples: np.ndarray) -> WhitenModel:
    """PCA whitening fit on rows of `samples` with an eigenvalue floor of
    1e-6 of the largest eigenvalue (unit scaling if all variance is zero)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise DataError("whitening needs a non-empty 2-D sample matrix")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / samples.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    # deterministic eigenvector signs: largest-magnitude entry positive
    for j in range(evecs.shape[1]):
        k = int(np.argmax(np.abs(evecs[:, j])))
        if evecs[k, j] < 0.0:
            evecs[:, j] = -evecs[:, j]
    top = float(evals[0]) if evals.size else 0.0
    if top > 0.0:
        floor = 1e-6 * top
        scale = 1.0 / np.sqrt(np.maximum(evals, floor))
    else:
        scale = np.ones_like(evals)
    return WhitenModel(mean=mean, rotation=evecs, scale=scale)


def identity_whitening(dim: int) -> WhitenModel:
    return WhitenModel(mean=np.zeros(dim), rotation=np.eye(dim),
                       scale=np.ones(dim))


def finalize(vector: np.ndarray, model: WhitenModel) -> np.ndarray:
    """l2-normalize, whiten, l2-normalize. A zero vector stays zero."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (model.dim,):
        raise DataError(f"vector dim {vector.shape} does not match whitening "
                        f"model dim {model.dim}")
    v = l2_normalize(vector)
    if not v.any():
        return np.zeros(model.dim, dtype=nnops.FLOAT)
    return l2_normalize(model.apply(v)).astype(nnops.FLOAT)


_WHITEN_TENSORS = ("whiten.mean", "whiten.rotation", "whiten.scale")


def save_whitening(path, model: WhitenModel) -> None:
    from . import model_io

    model_io.write_container(path, {
        "whiten.mean": model.mean,
        "whiten.rotation": model.rotation,
        "whiten.scale": model.scale,
    })


def load_whitening(path) -> WhitenModel:
    from . import model_io

    container = model_io.load_container(path)
    for name in _WHITEN_TENSORS:
        if name not in container:
            raise DataError(f"{path}: not a whitening model (missing {name})")
    return WhitenModel(mean=container["whiten.mean"].astype(np.float64),
                       rotation=container["whiten.rotation"].astype(np.float64),
                       scale=container["whiten.scale"].astype(np.float64))


def write_store(path, records: list[Descriptor], finalized: bool) -> None:
    dims = {r.vector.shape[0] for r in records}
    if len(dims) > 1:
        raise DataError(f"mixed descriptor dimensions in store: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<IIII", STORE_VERSION,
                             _FINALIZED if finalized else 0, dim, len(records)))
        for rec in records:
            encoded = rec.image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I4i", rec.region_id, *rec.bbox))
            fh.write(np.ascontiguousarray(rec.vector, dtype="<f4").tobytes())


def read_store(path) -> tuple[list[Descriptor], bool]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IOFormatError(f"cannot read store {path}: {exc}") from exc
    if blob[:4] != STORE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    version, flags, dim, count = struct.unpack_from("<IIII", blob, 4)
    if version != STORE_VERSION:
        raise VersionMismatchError(f"{path}: store version {version}")
    finalized = bool(flags & _FINALIZED)
    off = 20
    records: list[Descriptor] = []

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedPayloadError(f"{path}: truncated at byte {off}")
        piece = blob[off:off + n]
        off += n
        return piece

    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        image_id = take(id_len).decode("utf-8")
        region_id, t, l, b, r = struct.unpack("<I4i", take(20))
        vector = np.frombuffer(take(4 * dim), dtype="<f4").copy()
        records.append(Descriptor(vector=vector, image_id=image_id,
                                  region_id=region_id, normalized=finalized,
                                  bbox=(t, l, b, r)))
    if off != len(blob):
        raise IOFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return records, finalized
