"""Cross-framework parity: engine activations vs the source model's.

The engine is driven purely through its command line (`dump --layer @all`);
its activations come back in a weight container read by this package's own
reader. The torch side reruns the source model with forward hooks on the
manifest's capture points. Both sides consume the same PNG at its native
size, so preprocessing reduces to scale/normalize on both.
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import container
from .backbones import build_model

ENGINE_CMD = (sys.executable, "-m", "dasr.cli")


@dataclass
class VerifyReport:
    tolerance: float
    per_layer: dict[str, float] = field(default_factory=dict)
    first_diverging: str | None = None
    max_deviation: float = 0.0
    images: int = 0

    @property
    def passed(self) -> bool:
        return self.first_diverging is None


def torch_activations(model: torch.nn.Module, image_u8: np.ndarray,
                      capture_points, mean, scale) -> dict[str, np.ndarray]:
    """Run the source model, capturing each named submodule's output."""
    captured: dict[str, np.ndarray] = {}
    hooks = []
    wanted = {}
    for graph_layer, module_path in capture_points:
        wanted.setdefault(module_path, []).append(graph_layer)
    for module_path, layers in wanted.items():
        module = model.get_submodule(module_path)

        def hook(_mod, _inp, out, layers=layers):
            # in-place ReLU/add downstream mutate the buffer; copy now
            arr = out.detach().numpy()[0].transpose(1, 2, 0).copy()
            for layer in layers:
                captured[layer] = arr

        hooks.append(module.register_forward_hook(hook))
    x = torch.from_numpy(image_u8.astype(np.float32) / 255.0)
    x = (x - torch.tensor(mean, dtype=torch.float32)) / \
        torch.tensor(scale, dtype=torch.float32)
    x = x.permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        model(x)
    for h in hooks:
        h.remove()
    return captured


def engine_activations(container_path, graph_path, image_path,
                       long_side: int, workdir) -> dict[str, np.ndarray]:
    out = Path(workdir) / "activations.dasrc"
    cmd = [*ENGINE_CMD, "dump", "--weights", str(container_path), "--graph",
           str(graph_path), "--image", str(image_path), "--layer", "@all",
           "--long-side", str(long_side), "--out", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"engine dump failed ({proc.returncode}): "
                           f"{proc.stderr.strip()}")
    return container.read_tensors(out)


def verify(container_path, graph_path, manifest_path, image_paths,
           tolerance: float = 1e-3, model: torch.nn.Module | None = None
           ) -> VerifyReport:
    """Compare engine vs source activations at every capture point.

    Fails (first_diverging set) as soon as a layer exceeds the tolerance;
    layers are checked in graph order so corruption surfaces early.
    """
    manifest = json.loads(Path(manifest_path).read_text())
    capture_points = [tuple(p) for p in manifest["capture_points"]]
    mean = manifest["preprocessing"]["mean"]
    scale = manifest["preprocessing"]["scale"]
    if model is None:
        source = manifest["source"]
        model = build_model(manifest["model"],
                            seed=source.get("seed", 0),
                            checkpoint=source.get("path"),
                            pretrained=source.get("kind") == "pretrained")
    report = VerifyReport(tolerance=tolerance)
    for image_path in image_paths:
        image_u8 = np.asarray(Image.open(image_path).convert("RGB"))
        long_side = max(image_u8.shape[:2])
        reference = torch_activations(model, image_u8, capture_points,
                                      mean, scale)
        with tempfile.TemporaryDirectory() as workdir:
            engine = engine_activations(container_path, graph_path,
                                        image_path, long_side, workdir)
        report.images += 1
        for graph_layer, _ in capture_points:
            if graph_layer not in engine:
                raise RuntimeError(f"engine output missing layer "
                                   f"{graph_layer!r}")
            dev = float(np.abs(engine[graph_layer]
                               - reference[graph_layer]).max())
            report.per_layer[graph_layer] = max(
                report.per_layer.get(graph_layer, 0.0), dev)
            report.max_deviation = max(report.max_deviation, dev)
            if dev > tolerance and report.first_diverging is None:
                report.first_diverging = graph_layer
        if report.first_diverging is not None:
            break
    return report
