"""Backbone-assisted sanity checks driven through the engine CLI.

The retrieval check runs fully synthetically against the exported
(fixed-seed) ResNet-50. The region-count check needs a pretrained container
and a directory of natural photographs, so it is gated on environment
variables and skipped otherwise:

    DASR_PRETRAINED_DIR  directory holding resnet50.dasrc / .graph.txt
                         exported from trained weights
    DASR_PHOTO_DIR       directory with >= 200 natural photographs
"""

import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

ENGINE = (sys.executable, "-m", "dasr.cli")

H, W, P = 144, 192, 96
TAP = "l3b0out"  # untrained deep taps are degenerate; mid-depth separates


def engine(*args):
    proc = subprocess.run([*ENGINE, *map(str, args)], capture_output=True,
                          text=True)
    assert proc.returncode == 0, proc.stderr + proc.stdout
    return proc


def make_instance(rng):
    """Colored geometric object on its own base color."""
    patch = np.tile(rng.uniform(0.1, 0.9, size=3), (P, P, 1))
    for _ in range(4):
        color = rng.uniform(0, 1, size=3)
        kind = rng.integers(3)
        cy, cx = rng.integers(12, P - 12, size=2)
        s = int(rng.integers(10, 34))
        yy, xx = np.mgrid[0:P, 0:P]
        if kind == 0:
            mask = (np.abs(yy - cy) < s // 2) & (np.abs(xx - cx) < s)
        elif kind == 1:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < s ** 2
        else:
            mask = np.abs(yy - cy) + np.abs(xx - cx) < s
        patch[mask] = color
    return patch


def scene(rng, instance):
    yy, xx = np.mgrid[0:H, 0:W]
    a, b = rng.uniform(0.2, 0.5, size=2)
    img = np.stack([a + 0.2 * yy / H, b + 0.15 * xx / W,
                    np.full((H, W), rng.uniform(0.25, 0.45))], axis=2)
    py = int(rng.integers(4, H - P - 4))
    px = int(rng.integers(4, W - P - 4))
    img[py:py + P, px:px + P] = instance
    return np.clip(img, 0, 1), (py, px, py + P, px + P)


@pytest.mark.slow
def test_duplicated_instance_pairs_retrieved_top5(resnet_export, tmp_path):
    """50 images, 5 duplicated-instance pairs: every query (both directions)
    must retrieve its partner within the top 5."""
    rng = np.random.default_rng(20240808)
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    instances = [make_instance(rng) for _ in range(45)]
    boxes = {}
    pairs = []
    k = 0
    for p in range(5):
        ids = []
        for _ in range(2):
            name = f"c{k:02d}"
            k += 1
            arr, box = scene(rng, instances[p])
            boxes[name] = box
            ids.append(name)
            Image.fromarray((arr * 255).astype(np.uint8), "RGB").save(
                corpus / f"{name}.png")
        pairs.append(tuple(ids))
    for d in range(40):
        name = f"c{k:02d}"
        k += 1
        arr, box = scene(rng, instances[5 + d])
        boxes[name] = box
        Image.fromarray((arr * 255).astype(np.uint8), "RGB").save(
            corpus / f"{name}.png")

    weights = resnet_export["paths"]["container"]
    graph = resnet_export["paths"]["graph"]
    store = tmp_path / "c50.dasd"
    engine("extract", "--weights", weights, "--graph", graph, "--images",
           corpus, "--out", store, "--long-side", 192, "--mode", "dasr-star",
           "--tap", TAP)
    index = tmp_path / "c50.idx"
    engine("index", "--store", store, "--out", index)

    ranks = []
    for a, b in pairs:
        for query, want in ((a, b), (b, a)):
            t, l, bb, rr = boxes[query]
            out = tmp_path / f"res_{query}.txt"
            engine("search", "--weights", weights, "--graph", graph,
                   "--index", index, "--image", corpus / f"{query}.png",
                   "--bbox", f"{t},{l},{bb},{rr}", "--long-side", 192,
                   "--tap", TAP, "--out", out, "--query-id", query)
            lines = out.read_text().splitlines()[1:]
            ranked = [ln.split()[1] for ln in lines if ln.split()[1] != query]
            ranks.append((query, want, ranked.index(want) + 1))
    worst = max(r for _, _, r in ranks)
    print(f"[{'PASS' if worst <= 5 else 'FAIL'}] 10/10 pair queries, "
          f"worst rank {worst}: {[(q, r) for q, _, r in ranks]}")
    assert all(r <= 5 for _, _, r in ranks), ranks


@pytest.mark.slow
def test_region_count_on_natural_photos():
    """Mean DASR* region count in [6, 18] and DASR in [3.5, 10.5] at
    beta = 0.3 on natural photographs with a trained backbone."""
    pretrained = os.environ.get("DASR_PRETRAINED_DIR")
    photos = os.environ.get("DASR_PHOTO_DIR")
    if not pretrained or not photos:
        pytest.skip("needs DASR_PRETRAINED_DIR (trained resnet50 export) and "
                    "DASR_PHOTO_DIR (>= 200 natural photographs); pretrained "
                    "weights are not downloadable in this environment")
    photo_files = sorted(Path(photos).iterdir())
    if len(photo_files) < 200:
        pytest.skip(f"DASR_PHOTO_DIR has {len(photo_files)} images, need 200")
    weights = Path(pretrained) / "resnet50.dasrc"
    graph = Path(pretrained) / "resnet50.graph.txt"
    means = {}
    for mode, lo, hi in (("dasr-star", 6.0, 18.0), ("dasr", 3.5, 10.5)):
        out = Path(photos).parent / f"regions_{mode}.dasd"
        engine("extract", "--weights", weights, "--graph", graph, "--images",
               photos, "--out", out, "--mode", mode, "--beta", 0.3)
        manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
        counts = [img["regions"] for img in manifest["images"]]
        means[mode] = float(np.mean(counts))
        assert lo <= means[mode] <= hi, (mode, means[mode])
    print(f"[PASS] region-count sanity: {means}")
