"""Layer graph description and forward execution with full activation caching.

A NetworkGraph is an ordered list of LayerSpec records plus the weight arrays
they reference. The graph input is addressed by the reserved name "input".
Every layer's output is kept in an ActivationCache because the excitation
back-propagation pass revisits all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import (
    ConfigError,
    ShapeMismatchError,
    UnknownLayerKindError,
    UnresolvedRefError,
)

INPUT_NAME = "input"

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "add", "bnfold")
_WINDOWED = ("conv", "maxpool", "avgpool")


@dataclass(frozen=True)
class LayerSpec:
    """One layer record.

    kernel/stride/padding are (row, col) pairs and are present exactly for
    the windowed kinds (conv, maxpool, avgpool). `weight`/`bias` name tensors
    in the weight container (conv only; bias optional). `bnfold` marks a
    batch normalization folded into the preceding conv at export time; it is
    an identity at runtime.
    """

    name: str
    kind: str
    inputs: tuple[str, ...]
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: tuple[int, int] | None = None
    weight: str | None = None
    bias: str | None = None


@dataclass(frozen=True)
class Preprocessing:
    """Per-channel normalization applied to [0, 1]-scaled pixel values."""

    mean: tuple[float, ...]
    scale: tuple[float, ...]


@dataclass(eq=False)
class NetworkGraph:
    """Topologically ordered layers plus resolved weight arrays.

    input_shape is (H, W, C); H or W may be 0, meaning any extent is
    accepted (fully convolutional graphs). `tap` names the descriptor layer,
    `start` the layer whose peaks seed back-propagation.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    preprocessing: Preprocessing
    tap: str
    start: str
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._by_name = {}
        seen = set()
        for spec in self.layers:
            if spec.name == INPUT_NAME or spec.name in seen:
                raise ConfigError(f"duplicate or reserved layer name {spec.name!r}")
            if spec.kind not in LAYER_KINDS:
                raise UnknownLayerKindError(
                    f"layer {spec.name!r}: unknown kind {spec.kind!r}")
            windowed = spec.kind in _WINDOWED
            if windowed != (spec.kernel is not None
                            and spec.stride is not None
                            and spec.padding is not None):
                raise ConfigError(
                    f"layer {spec.name!r}: kernel/stride/padding must be "
                    f"present exactly for kinds {_WINDOWED}")
            if (spec.kind == "conv") != (spec.weight is not None):
                raise ConfigError(f"layer {spec.name!r}: weight ref is conv-only")
            want = 2 if spec.kind == "add" else 1
            if len(spec.inputs) != want:
                raise ConfigError(
                    f"layer {spec.name!r}: kind {spec.kind} takes {want} input(s)")
            for src in spec.inputs:
                if src != INPUT_NAME and src not in seen:
                    raise UnresolvedRefError(
                        f"layer {spec.name!r}: input {src!r} does not name an "
                        f"earlier layer or the graph input")
            seen.add(spec.name)
            self._by_name[spec.name] = spec
        for role, name in (("tap", self.tap), ("start", self.start)):
            if name not in self._by_name:
                raise UnresolvedRefError(f"{role} layer {name!r} not in graph")
        consumed = {src for spec in self.layers for src in spec.inputs}
        terminals = [s.name for s in self.layers if s.name not in consumed]
        if len(terminals) != 1:
            raise ConfigError(f"graph must have exactly one terminal output, "
                              f"found {terminals}")
        self.terminal = terminals[0]
        for spec in self.layers:
            if spec.kind != "conv":
                continue
            for ref in filter(None, (spec.weight, spec.bias)):
                if ref not in self.weights:
                    raise UnresolvedRefError(
                        f"layer {spec.name!r}: weight ref {ref!r} missing "
                        f"from container")
            if self.weights[spec.weight].ndim != 4:
                raise ConfigError(f"layer {spec.name!r}: conv weight must be "
                                  f"rank 4 (Hf, Wf, Cout, Cin)")

    def layer(self, name: str) -> LayerSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnresolvedRefError(f"unknown layer {name!r}") from None

    def consumers(self, name: str) -> list[LayerSpec]:
        return [s for s in self.layers if name in s.inputs]

    def cumulative_stride(self, name: str) -> tuple[int, int]:
        """Product of strides from the input to the named layer's output.

        All paths through the graph must agree (true for residual nets).
        """
        strides: dict[str, tuple[int, int]] = {INPUT_NAME: (1, 1)}
        for spec in self.layers:
            candidates = {strides[src] for src in spec.inputs}
            if len(candidates) != 1:
                raise ConfigError(f"layer {spec.name!r}: inputs disagree on "
                                  f"cumulative stride")
            sy, sx = candidates.pop()
            if spec.stride is not None:
                sy, sx = sy * spec.stride[0], sx * spec.stride[1]
            strides[spec.name] = (sy, sx)
            if spec.name == name:
                return strides[name]
        return strides[name]


ActivationCache = dict  # layer name -> (H, W, C) float32 array, plus "input"


def _conv_out_hw(spec: LayerSpec, h: int, w: int) -> tuple[int, int]:
    ho = nnops.out_extent(h, spec.kernel[0], spec.stride[0], spec.padding[0])
    wo = nnops.out_extent(w, spec.kernel[1], spec.stride[1], spec.padding[1])
    return ho, wo


def forward(graph: NetworkGraph, image: np.ndarray) -> ActivationCache:
    """Run the graph on one preprocessed image, caching every layer output."""
    image = nnops.as_tensor(image)
    if image.ndim != 3:
        raise ShapeMismatchError("input image must have shape (H, W, C)")
    gh, gw, gc = graph.input_shape
    h, w, c = image.shape
    if c != gc or (gh and h != gh) or (gw and w != gw):
        raise ShapeMismatchError(
            f"input shape {image.shape} does not match graph input shape "
            f"{graph.input_shape}")
    cache: ActivationCache = {INPUT_NAME: image}
    for spec in graph.layers:
        srcs = [cache[s] for s in spec.inputs]
        x = srcs[0]
        if spec.kind in _WINDOWED:
            ho, wo = _conv_out_hw(spec, x.shape[0], x.shape[1])
            if ho < 1 or wo < 1:
                raise ShapeMismatchError(
                    f"layer {spec.name!r}: kernel {spec.kernel} does not fit "
                    f"input of shape {x.shape}")
        if spec.kind == "conv":
            wgt = graph.weights[spec.weight]
            if wgt.shape[3] != x.shape[2]:
                raise ShapeMismatchError(
                    f"layer {spec.name!r}: weight expects {wgt.shape[3]} "
                    f"input channels, got {x.shape[2]}")
            bias = graph.weights[spec.bias] if spec.bias else None
            out = nnops.conv2d(x, wgt, spec.stride, spec.padding, bias)
        elif spec.kind == "relu":
            out = nnops.relu(x)
        elif spec.kind == "maxpool":
            out = nnops.maxpool2d(x, spec.kernel, spec.stride, spec.padding)
        elif spec.kind == "avgpool":
            out = nnops.avgpool2d(x, spec.kernel, spec.stride, spec.padding)
        elif spec.kind == "add":
            a, b = srcs
            if a.shape != b.shape:
                raise ShapeMismatchError(
                    f"layer {spec.name!r}: add inputs differ in shape "
                    f"{a.shape} vs {b.shape}")
            out = (a.astype(np.float64) + b.astype(np.float64)).astype(nnops.FLOAT)
        else:  # bnfold marker
            out = x
        assert np.isfinite(out).all(), f"non-finite output at layer {spec.name!r}"
        cache[spec.name] = out
    return cache


def mean_activation_map(cache: ActivationCache, layer: str) -> np.ndarray:
    """Channel-wise mean of a cached layer output, shape (H, W)."""
    if layer not in cache:
        raise UnresolvedRefError(f"layer {layer!r} not present in cache")
    x = cache[layer]
    return x.astype(np.float64).mean(axis=2).astype(nnops.FLOAT)


def input_receptive_field(graph: NetworkGraph, layer: str,
                          pos: tuple[int, int]) -> tuple[tuple[int, int], tuple[int, int]]:
    """Inclusive (row, col) interval of input pixels that can influence
    position `pos` of the named layer's output."""
    spans: dict[str, tuple[int, int, int, int]] = {}
    y, x = pos
    spans[layer] = (y, y, x, x)
    order = [s for s in graph.layers]
    for spec in reversed(order):
        if spec.name not in spans:
            continue
        y0, y1, x0, x1 = spans[spec.name]
        if spec.kind in _WINDOWED:
            sy, sx = spec.stride
            py, px = spec.padding
            kh, kw = spec.kernel
            src_span = (y0 * sy - py, y1 * sy - py + kh - 1,
                        x0 * sx - px, x1 * sx - px + kw - 1)
        else:
            src_span = (y0, y1, x0, x1)
        for src in spec.inputs:
            if src in spans:
                a0, a1, b0, b1 = spans[src]
                spans[src] = (min(a0, src_span[0]), max(a1, src_span[1]),
                              min(b0, src_span[2]), max(b1, src_span[3]))
            else:
                spans[src] = src_span
    y0, y1, x0, x1 = spans[INPUT_NAME]
    return (y0, y1), (x0, x1)
