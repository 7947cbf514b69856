"""Probabilistic back-propagation of response peaks to the input image.

A peak detected on the channel-mean map of the start layer is propagated
layer by layer back to the input. Each output neuron distributes its
probability mass among the input neurons of its window proportionally to
(clamped-positive) activation times positive weight; the per-neuron
normalizer Z is the window sum of those products, so mass is conserved
except where a carrier neuron has no positive-weight, positive-activation
child at all (such mass is dropped and tallied per layer).

Negative activations never carry mass: they are clamped to zero inside the
conditional, which also covers the mean-subtracted input image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops
from .errors import DataError, ShapeMismatchError
from .graph import INPUT_NAME, ActivationCache, LayerSpec, NetworkGraph

SEED_STAGE = "seed"


@dataclass(frozen=True)
class Peak:
    """A response-peak position on a mean activation map."""

    y: int
    x: int
    response: float


@dataclass
class ProbabilityMap:
    """Per-pixel contribution probability for one peak, max-normalized to [0, 1].

    `mass` is the total probability that survived to the input layer,
    recorded before normalization; `dropped` lists (layer, mass) lost at
    carriers without any positive-weight positive-activation child.
    """

    values: np.ndarray
    source_peak: Peak
    mass: float
    dropped: tuple[tuple[str, float], ...] = ()

    @property
    def dropped_total(self) -> float:
        return float(sum(m for _, m in self.dropped))


def _neighbor_max(m: np.ndarray) -> np.ndarray:
    """Max over the 8 neighbors of each cell (window clipped at borders)."""
    padded = np.pad(m, 1, constant_values=-np.inf)
    best = np.full(m.shape, -np.inf)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            shifted = padded[1 + dy:1 + dy + m.shape[0], 1 + dx:1 + dx + m.shape[1]]
            best = np.maximum(best, shifted)
    return best


def detect_peaks(mean_map: np.ndarray) -> list[Peak]:
    """Local maxima of a 2-D map under a 3x3 window, sorted by response.

    Ties are resolved at plateau granularity: an equal-valued 8-connected
    component is a peak only if none of its cells borders a strictly greater
    value (a regional maximum), and contributes a single representative, the
    component's smallest (y, x). Maps smaller than 3x3 yield the single
    global maximum.
    """
    m = np.asarray(mean_map, dtype=np.float64)
    if m.ndim != 2:
        raise DataError("mean map must be 2-D")
    if not np.isfinite(m).all():
        raise DataError("mean map contains non-finite values")
    h, w = m.shape
    if h < 3 or w < 3:
        y, x = np.unravel_index(int(np.argmax(m)), m.shape)
        return [Peak(int(y), int(x), float(m[y, x]))]
    candidate = m >= _neighbor_max(m)
    peaks: list[Peak] = []
    visited = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            if visited[y, x]:
                continue
            # flood the full equal-valued component; its row-major first
            # cell (y, x) is the representative
            stack = [(y, x)]
            visited[y, x] = True
            component = [(y, x)]
            while stack:
                cy, cx = stack.pop()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and not visited[ny, nx] \
                                and m[ny, nx] == m[y, x]:
                            visited[ny, nx] = True
                            stack.append((ny, nx))
                            component.append((ny, nx))
            if all(candidate[cy, cx] for cy, cx in component):
                peaks.append(Peak(y, x, float(m[y, x])))
    peaks.sort(key=lambda p: (-p.response, p.y, p.x))
    return peaks


def seed_pixels_above_mean(mean_map: np.ndarray) -> list[Peak]:
    """All positions strictly above the map's arithmetic mean, best first."""
    m = np.asarray(mean_map, dtype=np.float64)
    if m.ndim != 2:
        raise DataError("mean map must be 2-D")
    if not np.isfinite(m).all():
        raise DataError("mean map contains non-finite values")
    avg = m.mean()
    ys, xs = np.nonzero(m > avg)
    seeds = [Peak(int(y), int(x), float(m[y, x])) for y, x in zip(ys, xs)]
    seeds.sort(key=lambda p: (-p.response, p.y, p.x))
    return seeds


def _ratio(p_out: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """p_out / z with zero-Z carriers dropped; returns (ratio, dropped per map)."""
    alive = z > 0.0
    ratio = np.where(alive, p_out, 0.0) / np.where(alive, z, 1.0)
    dropped = np.where(alive, 0.0, p_out).sum(axis=(1, 2, 3))
    return ratio, dropped


class _Backprop:
    """Shared Z cache for repeated back-propagations over one activation cache."""

    def __init__(self, graph: NetworkGraph, cache: ActivationCache):
        self.graph = graph
        self.cache = cache
        self._z: dict[str, np.ndarray] = {}

    def _z_for(self, spec: LayerSpec) -> np.ndarray:
        z = self._z.get(spec.name)
        if z is None:
            apos = np.maximum(self.cache[spec.inputs[0]], 0.0)
            if spec.kind == "conv":
                wpos = np.maximum(self.graph.weights[spec.weight], 0.0)
                z = nnops.conv2d(apos, wpos, spec.stride, spec.padding,
                                 out_dtype=np.float64)
            else:
                z = nnops.window_sum(apos, spec.kernel, spec.stride,
                                     spec.padding, out_dtype=np.float64)
            self._z[spec.name] = z
        return z

    def layer(self, p_out: np.ndarray, spec: LayerSpec
              ) -> tuple[list[np.ndarray], np.ndarray]:
        """Distribute batched output probability (N, Ho, Wo, C) to the layer's
        inputs; returns per-input maps and per-map dropped mass."""
        n = p_out.shape[0]
        none_dropped = np.zeros(n)
        if spec.kind in ("relu", "bnfold"):
            return [p_out], none_dropped
        if spec.kind == "add":
            a1 = np.maximum(self.cache[spec.inputs[0]], 0.0).astype(np.float64)
            a2 = np.maximum(self.cache[spec.inputs[1]], 0.0).astype(np.float64)
            denom = a1 + a2
            w1 = np.where(denom > 0.0, a1 / np.where(denom > 0.0, denom, 1.0), 0.5)
            return [p_out * w1, p_out * (1.0 - w1)], none_dropped
        apos = np.maximum(self.cache[spec.inputs[0]], 0.0).astype(np.float64)
        z = self._z_for(spec)
        ratio, dropped = _ratio(p_out, z)
        if spec.kind == "conv":
            wpos = np.maximum(self.graph.weights[spec.weight], 0.0)
            spread = nnops.conv2d_transpose(ratio, wpos, spec.stride,
                                            spec.padding, apos.shape[:2],
                                            out_dtype=np.float64)
        else:  # maxpool / avgpool: uniform positive weights cancel in Z
            spread = nnops.window_scatter(ratio, spec.kernel, spec.stride,
                                          spec.padding, apos.shape[:2],
                                          out_dtype=np.float64)
        return [apos * spread], dropped

    def run(self, peaks: list[Peak]) -> list[ProbabilityMap]:
        graph, cache = self.graph, self.cache
        start_act = cache[graph.start]
        hs, ws, cs = start_act.shape
        n = len(peaks)
        p_start = np.zeros((n, hs, ws, cs), dtype=np.float64)
        drops: list[list[tuple[str, float]]] = [[] for _ in range(n)]
        for i, peak in enumerate(peaks):
            if not (0 <= peak.y < hs and 0 <= peak.x < ws):
                raise DataError(
                    f"peak ({peak.y}, {peak.x}) outside start layer extent "
                    f"({hs}, {ws})")
            act = np.maximum(start_act[peak.y, peak.x, :], 0.0).astype(np.float64)
            total = act.sum()
            if total > 0.0:
                p_start[i, peak.y, peak.x, :] = act / total
            else:
                drops[i].append((SEED_STAGE, 1.0))
        start_idx = next(i for i, s in enumerate(graph.layers)
                         if s.name == graph.start)
        probs: dict[str, np.ndarray] = {graph.start: p_start}
        for spec in reversed(graph.layers[:start_idx + 1]):
            p_out = probs.pop(spec.name, None)
            if p_out is None:
                continue
            contribs, dropped = self.layer(p_out, spec)
            for i in range(n):
                if dropped[i] > 0.0:
                    drops[i].append((spec.name, float(dropped[i])))
            for src, p_in in zip(spec.inputs, contribs):
                if src in probs:
                    probs[src] += p_in
                else:
                    probs[src] = p_in
        p_image = probs.get(INPUT_NAME)
        if p_image is None:
            raise DataError("start layer is not connected to the graph input")
        flat = p_image.sum(axis=3)
        out = []
        for i, peak in enumerate(peaks):
            values = flat[i]
            mass = float(values.sum())
            top = values.max()
            if top > 0.0:
                values = values / top
            out.append(ProbabilityMap(values.astype(nnops.FLOAT), peak, mass,
                                      tuple(drops[i])))
        return out


def backprop_layer(p_out: np.ndarray, spec: LayerSpec,
                   graph: NetworkGraph, cache: ActivationCache
                   ) -> tuple[list[np.ndarray], float]:
    """Push one probability map through a single layer.

    Returns one input-side map per layer input (two for residual adds) and
    the mass dropped at zero-normalizer carriers.
    """
    expected = cache[spec.name].shape
    p_out = np.asarray(p_out, dtype=np.float64)
    if p_out.shape != expected:
        raise ShapeMismatchError(
            f"probability shape {p_out.shape} does not match output of layer "
            f"{spec.name!r} {expected}")
    contribs, dropped = _Backprop(graph, cache).layer(p_out[None], spec)
    return [c[0] for c in contribs], float(dropped[0])


def backprop_peak(graph: NetworkGraph, cache: ActivationCache,
                  peak: Peak) -> ProbabilityMap:
    """Back-propagate a single start-layer peak to an input probability map."""
    return _Backprop(graph, cache).run([peak])[0]


def backprop_seeds(graph: NetworkGraph, cache: ActivationCache,
                   peaks: list[Peak], chunk: int = 8) -> list[ProbabilityMap]:
    """Back-propagate many seeds over one cache, in memory-bounded batches."""
    engine = _Backprop(graph, cache)
    maps: list[ProbabilityMap] = []
    for lo in range(0, len(peaks), max(1, chunk)):
        maps.extend(engine.run(peaks[lo:lo + max(1, chunk)]))
    return maps
