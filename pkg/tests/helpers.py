"""Shared builders for desk-scale networks and random test graphs."""

from __future__ import annotations

import numpy as np

from dasr import LayerSpec, NetworkGraph, Preprocessing


def make_graph(layers, weights, input_shape, tap=None, start=None,
               mean=None, scale=None):
    c = input_shape[2]
    terminal = layers[-1].name
    return NetworkGraph(
        layers=tuple(layers),
        input_shape=input_shape,
        preprocessing=Preprocessing(tuple(mean or [0.0] * c),
                                    tuple(scale or [1.0] * c)),
        tap=tap or terminal,
        start=start or terminal,
        weights=weights,
    )


def conv(name, src, weights_dict, w, b=None, stride=(1, 1), pad=(0, 0)):
    w = np.asarray(w, dtype=np.float32)
    weights_dict[f"{name}.w"] = w
    spec_b = None
    if b is not None:
        weights_dict[f"{name}.b"] = np.asarray(b, dtype=np.float32)
        spec_b = f"{name}.b"
    return LayerSpec(name, "conv", (src,), kernel=w.shape[:2], stride=stride,
                     padding=pad, weight=f"{name}.w", bias=spec_b)


def identity_chain(depth, channels=1, size=5):
    """Stack of 1x1 identity convs (weight 1, bias 0) with a final relu."""
    weights = {}
    layers = []
    src = "input"
    eye = np.zeros((1, 1, channels, channels), dtype=np.float32)
    for c in range(channels):
        eye[0, 0, c, c] = 1.0
    for i in range(depth):
        layers.append(conv(f"c{i}", src, weights, eye))
        src = f"c{i}"
    layers.append(LayerSpec("out", "relu", (src,)))
    graph = make_graph(layers, weights, (size, size, channels))
    return graph


def _rand_conv(rng, name, src, weights, cin, positive_bias=False):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, min(2, k)))
    cout = int(rng.integers(1, 5))
    w = rng.normal(0.0, 1.0, size=(k, k, cout, cin)).astype(np.float32)
    b = rng.normal(0.0, 0.1, size=cout).astype(np.float32) \
        if rng.random() < 0.5 else None
    return conv(name, src, weights, w, b, stride=(stride, stride),
                pad=(pad, pad)), cout


def _fits(shape_hw, layer):
    if layer.kernel is None:
        return True
    ho = (shape_hw[0] + 2 * layer.padding[0] - layer.kernel[0]) // layer.stride[0] + 1
    wo = (shape_hw[1] + 2 * layer.padding[1] - layer.kernel[1]) // layer.stride[1] + 1
    return ho >= 1 and wo >= 1


def _out_hw(shape_hw, layer):
    if layer.kernel is None:
        return shape_hw
    ho = (shape_hw[0] + 2 * layer.padding[0] - layer.kernel[0]) // layer.stride[0] + 1
    wo = (shape_hw[1] + 2 * layer.padding[1] - layer.kernel[1]) // layer.stride[1] + 1
    return ho, wo


def random_tiny_graph(rng, max_layers=3, max_side=8, max_channels=4,
                      allow_add=True, nonneg_input=False):
    """Random small network plus a matching random input image.

    Occasionally emits a residual diamond (two parallel convs joined by an
    add). Inputs mix signs unless nonneg_input is set.
    """
    h = int(rng.integers(4, max_side + 1))
    w = int(rng.integers(4, max_side + 1))
    cin = int(rng.integers(1, max_channels + 1))
    weights: dict[str, np.ndarray] = {}
    layers: list[LayerSpec] = []

    if allow_add and max_layers >= 3 and rng.random() < 0.3:
        # diamond: two stride-1 same-shape convs from the input, then add
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, min(2, k)))
        cout = int(rng.integers(1, max_channels + 1))
        for branch in ("ba", "bb"):
            wgt = rng.normal(size=(k, k, cout, cin)).astype(np.float32)
            layers.append(conv(branch, "input", weights, wgt,
                               stride=(1, 1), pad=(pad, pad)))
        layers.append(LayerSpec("join", "add", ("ba", "bb")))
    else:
        n = int(rng.integers(1, max_layers + 1))
        src = "input"
        shape_hw = (h, w)
        channels = cin
        for i in range(n):
            roll = rng.random()
            if roll < 0.55:
                for _ in range(20):
                    layer, cout = _rand_conv(rng, f"l{i}", src, weights, channels)
                    if _fits(shape_hw, layer):
                        break
                    weights.pop(f"l{i}.w", None)
                    weights.pop(f"l{i}.b", None)
                channels = cout
            elif roll < 0.7:
                layer = LayerSpec(f"l{i}", "relu", (src,))
            else:
                kind = "maxpool" if rng.random() < 0.5 else "avgpool"
                for _ in range(20):
                    k = int(rng.integers(2, 4))
                    stride = int(rng.integers(1, 3))
                    pad = int(rng.integers(0, min(2, k)))
                    layer = LayerSpec(f"l{i}", kind, (src,), kernel=(k, k),
                                      stride=(stride, stride), padding=(pad, pad))
                    if _fits(shape_hw, layer):
                        break
            if not _fits(shape_hw, layer):
                continue
            shape_hw = _out_hw(shape_hw, layer)
            layers.append(layer)
            src = layer.name
        if not layers:
            layers.append(LayerSpec("l0", "relu", ("input",)))
    graph = make_graph(layers, weights, (h, w, cin))
    lo = 0.0 if nonneg_input else -1.0
    image = rng.uniform(lo, 2.0, size=(h, w, cin)).astype(np.float32)
    return graph, image
