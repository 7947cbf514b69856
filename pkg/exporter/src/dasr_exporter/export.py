"""Export orchestration: backbone -> (container, graph file, manifest)."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from . import container
from .backbones import IMAGENET_MEAN, IMAGENET_SCALE, build_model, walk


def export(model_name: str, out_dir, seed: int = 0, checkpoint=None,
           pretrained: bool = False) -> dict:
    """Write <model>.dasrc / <model>.graph.txt / <model>.manifest.json.

    Returns the manifest dict (with file paths filled in).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(model_name, seed=seed, checkpoint=checkpoint,
                        pretrained=pretrained)
    exported = walk(model_name, model)

    container_path = out_dir / f"{model_name}.dasrc"
    graph_path = out_dir / f"{model_name}.graph.txt"
    manifest_path = out_dir / f"{model_name}.manifest.json"

    checksums = container.write_tensors(container_path, exported.tensors)
    graph_path.write_text(exported.graph_text, encoding="utf-8")

    if checkpoint is not None:
        source = {"kind": "checkpoint", "path": str(checkpoint)}
    elif pretrained:
        source = {"kind": "pretrained", "id": f"torchvision/{model_name}"}
    else:
        source = {"kind": "random-init", "seed": seed}
    manifest = {
        "model": model_name,
        "source": source,
        "preprocessing": {"mean": list(IMAGENET_MEAN),
                          "scale": list(IMAGENET_SCALE)},
        "tap": exported.tap,
        "start": exported.start,
        "conv_count": exported.conv_count,
        "tensors": [{"name": name, "dims": list(exported.tensors[name].shape),
                     "sha256": checksums[name]}
                    for name in exported.tensors],
        "folds": [dataclasses.asdict(f) for f in exported.folds],
        "capture_points": exported.capture_points,
        "files": {"container": container_path.name, "graph": graph_path.name},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                             + "\n", encoding="utf-8")
    return {**manifest, "paths": {"container": container_path,
                                  "graph": graph_path,
                                  "manifest": manifest_path}}
