"""Exact instance search over a flat descriptor index, plus evaluation metrics.

An image's score against a query is the maximum cosine similarity over its
instance descriptors; the maximizing region's box is kept as localization
evidence. Results files are plain text: a "# query <id>" header line, then
one "rank image_id score top left bottom right" line per hit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .descriptor import Descriptor
from .errors import DataError, IOFormatError
from .regions import Box, iou

log = logging.getLogger(__name__)

DEFAULT_IOU_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class RankedHit:
    image_id: str
    score: float
    bbox: Box


@dataclass
class RankedList:
    query_id: str
    hits: list[RankedHit]


@dataclass
class GroundTruth:
    """Relevant image ids per query, with optional instance boxes."""

    relevant: dict[str, list[str]] = field(default_factory=dict)
    boxes: dict[tuple[str, str], list[Box]] = field(default_factory=dict)

    def boxes_by_image(self) -> dict[str, list[Box]]:
        merged: dict[str, list[Box]] = {}
        for (_, image_id), boxes in self.boxes.items():
            merged.setdefault(image_id, []).extend(boxes)
        return merged


class InstanceIndex:
    """Flat array of finalized descriptors with an image roster."""

    def __init__(self, records: list[Descriptor]):
        kept = [r for r in records if np.any(r.vector)]
        self.skipped_invalid = len(records) - len(kept)
        if kept:
            norms = np.linalg.norm(np.stack([r.vector for r in kept]), axis=1)
            bad = np.abs(norms - 1.0) > 1e-3
            if bad.any():
                raise DataError(
                    f"{int(bad.sum())} index vectors are not unit-norm; "
                    f"finalize descriptors before indexing")
        self.records = kept
        self.matrix = np.stack([r.vector for r in kept]) if kept else \
            np.zeros((0, 0), dtype=np.float32)
        self.roster = sorted({r.image_id for r in kept})

    def __len__(self) -> int:
        return len(self.records)


def search(query: np.ndarray, index: InstanceIndex,
           query_id: str = "query") -> RankedList:
    """Rank every roster image by its best-matching instance descriptor."""
    if len(index) == 0:
        raise DataError("cannot search an empty index")
    q = np.asarray(query, dtype=np.float64)
    scores = index.matrix.astype(np.float64) @ q
    best: dict[str, tuple[float, Box]] = {}
    for rec, score in zip(index.records, scores):
        score = float(score)
        cur = best.get(rec.image_id)
        if cur is None or score > cur[0]:
            best[rec.image_id] = (score, rec.bbox)
    hits = [RankedHit(image_id, s, bbox) for image_id, (s, bbox) in best.items()]
    hits.sort(key=lambda h: (-h.score, h.image_id))
    return RankedList(query_id=query_id, hits=hits)


def average_precision(hits: list[RankedHit], relevant: set[str],
                      k: int | None = None) -> float:
    top = hits if k is None else hits[:k]
    denom = min(len(relevant), k) if k is not None else len(relevant)
    found = 0
    total = 0.0
    for rank, hit in enumerate(top, start=1):
        if hit.image_id in relevant:
            found += 1
            total += found / rank
    return total / denom if denom > 0 else 0.0


def map_at_k(ranked_lists: list[RankedList], gt: GroundTruth,
             k: int | None = None) -> float:
    """Mean AP truncated at k; queries without relevant images are skipped."""
    aps = []
    for ranked in ranked_lists:
        relevant = set(gt.relevant.get(ranked.query_id, ()))
        if not relevant:
            log.warning("query %r has no relevant images; excluded from mAP",
                        ranked.query_id)
            continue
        aps.append(average_precision(ranked.hits, relevant, k))
    if not aps:
        raise DataError("no query has relevant images; mAP undefined")
    return float(np.mean(aps))


def recall_iou_curve(detections: dict[str, list[Box]],
                     gt_boxes: dict[str, list[Box]],
                     thresholds=DEFAULT_IOU_GRID) -> list[tuple[float, float]]:
    """Fraction of ground-truth instances matched by at least one detection,
    per IoU threshold."""
    total = sum(len(v) for v in gt_boxes.values())
    curve = []
    for t in thresholds:
        matched = 0
        for image_id, boxes in gt_boxes.items():
            dets = detections.get(image_id, [])
            for gt_box in boxes:
                if any(iou(d, gt_box) >= t for d in dets):
                    matched += 1
        curve.append((float(t), matched / total if total else 0.0))
    return curve


def parse_ground_truth(path) -> GroundTruth:
    """Read "query_id image_id [top left bottom right]" lines."""
    gt = GroundTruth()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IOFormatError(f"cannot read ground truth {path}: {exc}") from exc
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 6):
            raise IOFormatError(
                f"{path}:{line_no}: expected 'query image [t l b r]'")
        query_id, image_id = parts[0], parts[1]
        gt.relevant.setdefault(query_id, [])
        if image_id not in gt.relevant[query_id]:
            gt.relevant[query_id].append(image_id)
        if len(parts) == 6:
            box = tuple(int(v) for v in parts[2:6])
            gt.boxes.setdefault((query_id, image_id), []).append(box)
    return gt


def write_results(path, ranked: RankedList) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# query {ranked.query_id}\n")
        for rank, hit in enumerate(ranked.hits, start=1):
            t, l, b, r = hit.bbox
            fh.write(f"{rank} {hit.image_id} {hit.score:.6f} {t} {l} {b} {r}\n")


def read_results(path) -> RankedList:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IOFormatError(f"cannot read results {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# query "):
        raise IOFormatError(f"{path}: missing '# query <id>' header")
    query_id = lines[0][len("# query "):].strip()
    hits = []
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise IOFormatError(f"{path}:{line_no}: malformed result line")
        hits.append(RankedHit(image_id=parts[1], score=float(parts[2]),
                              bbox=tuple(int(v) for v in parts[3:7])))
    return RankedList(query_id=query_id, hits=hits)
