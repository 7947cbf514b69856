"""End-to-end extraction: image file -> salient regions -> pooled descriptors.

All coordinates emitted by the pipeline (regions, query boxes, result boxes)
live in the preprocessed image space, i.e. after the long-side resize.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor import Descriptor, l2_normalize, pool_region
from .errors import DataError
from .graph import NetworkGraph, forward, mean_activation_map
from .ingest import PreprocessSpec, load_image, preprocess
from .regions import Box, DetectorConfig, SalientRegion, detect_regions

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class ImageExtraction:
    image_id: str
    image_hw: tuple[int, int]
    regions: list[SalientRegion]
    vectors: list[np.ndarray]  # l2-normalized pooled descriptors, one per region
    mean_map: np.ndarray
    diagnostics: dict


def scale_box(box: Box, from_hw: tuple[int, int], to_hw: tuple[int, int]) -> Box:
    """Map a half-open box between image resolutions (round-outward)."""
    fy = to_hw[0] / from_hw[0]
    fx = to_hw[1] / from_hw[1]
    t, l, b, r = box
    t2 = int(np.floor(t * fy))
    l2 = int(np.floor(l * fx))
    b2 = int(np.ceil(b * fy))
    r2 = int(np.ceil(r * fx))
    t2, l2 = max(0, t2), max(0, l2)
    b2 = min(to_hw[0], max(b2, t2 + 1))
    r2 = min(to_hw[1], max(r2, l2 + 1))
    return t2, l2, b2, r2


def extract_image(graph: NetworkGraph, image: np.ndarray, image_id: str,
                  config: DetectorConfig, tap: str | None = None,
                  long_side: int = 512, chunk: int = 8) -> ImageExtraction:
    """Detect regions on one 8-bit RGB image and pool their descriptors."""
    spec = PreprocessSpec.from_graph_preprocessing(graph.preprocessing, long_side)
    tensor = preprocess(image, spec)
    cache = forward(graph, tensor)
    diagnostics: dict = {}
    regions = detect_regions(graph, cache, config, chunk=chunk,
                             diagnostics=diagnostics)
    tap = tap or graph.tap
    vectors = [l2_normalize(pool_region(graph, cache, tap, r.bbox)).astype(np.float32)
               for r in regions]
    return ImageExtraction(image_id=image_id, image_hw=tensor.shape[:2],
                           regions=regions, vectors=vectors,
                           mean_map=mean_activation_map(cache, graph.start),
                           diagnostics=diagnostics)


def query_descriptor(graph: NetworkGraph, image: np.ndarray, bbox: Box,
                     tap: str | None = None, long_side: int = 512
                     ) -> tuple[np.ndarray, Box]:
    """Pool a query descriptor directly from a user box (no detection).

    The box is given in the original image's pixel coordinates and is scaled
    to the preprocessed space. Returns the l2-normalized vector and the
    scaled box.
    """
    t, l, b, r = bbox
    h, w = image.shape[:2]
    if not (0 <= t < b <= h and 0 <= l < r <= w):
        raise DataError(f"query bbox {bbox} does not fit image of size "
                        f"({h}, {w})")
    spec = PreprocessSpec.from_graph_preprocessing(graph.preprocessing, long_side)
    tensor = preprocess(image, spec)
    cache = forward(graph, tensor)
    scaled = scale_box(bbox, (h, w), tensor.shape[:2])
    vec = pool_region(graph, cache, tap or graph.tap, scaled)
    return l2_normalize(vec).astype(np.float32), scaled


def list_images(paths: list[str]) -> list[Path]:
    """Expand files/directories into a sorted list of image files."""
    out: list[Path] = []
    for entry in paths:
        p = Path(entry)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir()
                              if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            out.append(p)
    return sorted(set(out))


def extract_many(graph: NetworkGraph, files: list[Path],
                 config: DetectorConfig, tap: str | None = None,
                 long_side: int = 512, chunk: int = 8,
                 workers: int = 1) -> list[ImageExtraction]:
    """Extract a batch of images; output order follows the input order
    regardless of worker scheduling."""

    def one(path: Path) -> ImageExtraction:
        return extract_image(graph, load_image(path), path.stem, config,
                             tap=tap, long_side=long_side, chunk=chunk)

    if workers <= 1:
        return [one(p) for p in files]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, files))


def to_records(extraction: ImageExtraction) -> list[Descriptor]:
    records = []
    for region_id, (region, vec) in enumerate(zip(extraction.regions,
                                                  extraction.vectors)):
        records.append(Descriptor(vector=vec, image_id=extraction.image_id,
                                  region_id=region_id, normalized=False,
                                  bbox=region.bbox))
    return records
