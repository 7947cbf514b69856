import numpy as np
import pytest
from PIL import Image

from dasr import LayerSpec, write_container, write_graph

from helpers import conv, make_graph


@pytest.fixture(scope="session")
def toy_model(tmp_path_factory):
    """A small two-stage conv net saved as container + graph files."""
    root = tmp_path_factory.mktemp("model")
    rng = np.random.default_rng(1234)
    weights = {}
    layers = [
        conv("c1", "input", weights,
             rng.normal(0.0, 0.4, size=(3, 3, 4, 3)), b=np.zeros(4),
             stride=(2, 2), pad=(1, 1)),
        LayerSpec("r1", "relu", ("c1",)),
        conv("c2", "r1", weights,
             rng.normal(0.0, 0.4, size=(3, 3, 6, 4)), b=np.zeros(6),
             stride=(2, 2), pad=(1, 1)),
        LayerSpec("r2", "relu", ("c2",)),
    ]
    graph = make_graph(layers, weights, (0, 0, 3), tap="r1", start="r2",
                       mean=[0.5, 0.5, 0.5], scale=[0.5, 0.5, 0.5])
    weights_path = root / "weights.dasrc"
    graph_path = root / "graph.txt"
    write_container(weights_path, weights)
    write_graph(graph_path, graph)
    return {"weights": weights_path, "graph": graph_path, "network": graph}


def synth_image(rng, size=(48, 64), blobs=2):
    """Smooth gradient background with high-contrast square patches."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    base = np.stack([
        0.2 + 0.3 * yy / h,
        0.2 + 0.3 * xx / w,
        np.full((h, w), 0.35),
    ], axis=2)
    for _ in range(blobs):
        by = int(rng.integers(4, h - 16))
        bx = int(rng.integers(4, w - 16))
        bh = int(rng.integers(8, 14))
        bw = int(rng.integers(8, 14))
        color = rng.uniform(0.6, 1.0, size=3)
        texture = rng.uniform(-0.15, 0.15, size=(bh, bw, 3))
        base[by:by + bh, bx:bx + bw] = color + texture
    return (np.clip(base, 0, 1) * 255).astype(np.uint8)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Ten synthetic PNG images."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(777)
    for i in range(10):
        Image.fromarray(synth_image(rng), mode="RGB").save(
            root / f"im{i:02d}.png")
    return root
