"""Image-level embedding: VLAD over instance descriptors.

The encoder assigns every descriptor of an image to its nearest codebook
centroid, sums residuals per centroid, concatenates the k blocks, then
applies an optional PCA rotation, signed power-law normalization with
exponent 0.5, and a final l2 normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model_io, nnops
from .descriptor import l2_normalize
from .errors import DataError

CENTROIDS_TENSOR = "vlad.centroids"
ROTATION_TENSOR = "vlad.rotation"


@dataclass
class Codebook:
    centroids: np.ndarray  # (k, d)
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class VladVector:
    vector: np.ndarray
    post_processed: bool
    valid: bool


def _assign(samples: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # squared Euclidean; argmin breaks ties toward the lower centroid index
    d2 = ((samples[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _kmeans_pp(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = samples.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((samples - samples[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            # all remaining points coincide with a centroid; take any unused
            unused = [i for i in range(n) if i not in chosen]
            idx = unused[0] if unused else int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((samples - samples[idx]) ** 2).sum(axis=1))
    return samples[chosen].copy()


def train_codebook(samples: np.ndarray, k: int, seed: int = 0,
                   max_iter: int = 100, tol: float = 1e-4) -> Codebook:
    """Lloyd k-means with k-means++ seeding and a fixed RNG seed.

    Iteration stops after `max_iter` rounds or when the relative inertia
    change falls below `tol`. Empty clusters keep their previous centroid.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise DataError("codebook training needs a 2-D sample matrix")
    n = samples.shape[0]
    if n < k:
        raise DataError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(samples, k, rng)
    prev_inertia = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        labels = _assign(samples, centroids)
        diffs = samples - centroids[labels]
        inertia = float((diffs * diffs).sum())
        for j in range(k):
            members = samples[labels == j]
            if members.shape[0] > 0:
                centroids[j] = members.mean(axis=0)
        if prev_inertia is not None:
            if prev_inertia == 0.0 or \
                    abs(prev_inertia - inertia) / prev_inertia < tol:
                break
        prev_inertia = inertia
    labels = _assign(samples, centroids)
    diffs = samples - centroids[labels]
    inertia = float((diffs * diffs).sum())
    return Codebook(centroids=centroids.astype(nnops.FLOAT),
                    metadata={"k": k, "seed": seed, "iterations": iterations,
                              "inertia": inertia, "samples": n})


def signed_power(v: np.ndarray, exponent: float = 0.5) -> np.ndarray:
    return np.sign(v) * np.abs(v) ** exponent


def accumulate(descriptors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Concatenated per-centroid residual sums, shape (k * d,).

    Members of each centroid are summed in lexicographic order so the result
    is bit-identical under any permutation of the input bag.
    """
    k, d = codebook.centroids.shape
    acc = np.zeros((k, d), dtype=np.float64)
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.size:
        centroids = codebook.centroids.astype(np.float64)
        labels = _assign(descriptors, centroids)
        for j in range(k):
            members = descriptors[labels == j]
            if members.shape[0] == 0:
                continue
            members = members[np.lexsort(members.T[::-1])]
            for vec in members:
                acc[j] += vec - centroids[j]
    return acc.reshape(-1)


def encode(descriptors: np.ndarray, codebook: Codebook,
           rotation: np.ndarray | None = None,
           exponent: float = 0.5) -> VladVector:
    """VLAD-encode one image's descriptor bag.

    An empty bag, or a bag whose residuals cancel exactly, yields the zero
    vector flagged invalid.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim == 1:
        descriptors = descriptors.reshape(1, -1) if descriptors.size else \
            descriptors.reshape(0, codebook.centroids.shape[1])
    acc = accumulate(descriptors, codebook)
    if not acc.any():
        return VladVector(vector=acc.astype(nnops.FLOAT), post_processed=True,
                          valid=False)
    v = acc if rotation is None else rotation.T @ acc
    v = l2_normalize(signed_power(v, exponent))
    return VladVector(vector=v.astype(nnops.FLOAT), post_processed=True,
                      valid=True)


def fit_rotation(vlad_accumulators: np.ndarray) -> np.ndarray:
    """PCA rotation learned from held-out raw VLAD accumulators.

    Columns are principal axes ordered by descending variance, with a
    deterministic sign convention; no dimensionality reduction.
    """
    x = np.asarray(vlad_accumulators, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("rotation fit needs a non-empty 2-D sample matrix")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evecs = evecs[:, order]
    for j in range(evecs.shape[1]):
        i = int(np.argmax(np.abs(evecs[:, j])))
        if evecs[i, j] < 0.0:
            evecs[:, j] = -evecs[:, j]
    return evecs


def save_model(path, codebook: Codebook, rotation: np.ndarray | None = None) -> None:
    tensors = {CENTROIDS_TENSOR: codebook.centroids}
    if rotation is not None:
        tensors[ROTATION_TENSOR] = rotation
    model_io.write_container(path, tensors)


def load_model(path) -> tuple[Codebook, np.ndarray | None]:
    container = model_io.load_container(path)
    if CENTROIDS_TENSOR not in container:
        raise DataError(f"{path}: not a VLAD model (missing {CENTROIDS_TENSOR})")
    codebook = Codebook(centroids=container[CENTROIDS_TENSOR])
    rotation = container[ROTATION_TENSOR] if ROTATION_TENSOR in container else None
    return codebook, rotation
