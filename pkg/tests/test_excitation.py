"""Peak detection and probabilistic back-propagation vs exhaustive oracles."""

import numpy as np
import pytest

from dasr import (
    LayerSpec,
    Peak,
    backprop_layer,
    backprop_peak,
    backprop_seeds,
    detect_peaks,
    forward,
    input_receptive_field,
    mean_activation_map,
    seed_pixels_above_mean,
)
from dasr.errors import DataError, ShapeMismatchError

from helpers import conv, identity_chain, make_graph, random_tiny_graph
from oracles import brute_force_peaks, brute_force_seeds, oracle_backprop


# ---------------------------------------------------------------------------
# peaks and seeds
# ---------------------------------------------------------------------------

def test_single_positive_center_peak():
    m = np.zeros((5, 5), dtype=np.float32)
    m[2, 2] = 1.0
    peaks = detect_peaks(m)
    assert [(p.y, p.x) for p in peaks] == [(2, 2)]
    assert peaks[0].response == pytest.approx(1.0)


def test_constant_map_single_plateau_representative():
    peaks = detect_peaks(np.ones((4, 6), dtype=np.float32))
    assert [(p.y, p.x) for p in peaks] == [(0, 0)]


def test_small_map_returns_global_max():
    m = np.array([[1.0, 5.0], [2.0, 3.0]], dtype=np.float32)
    peaks = detect_peaks(m)
    assert [(p.y, p.x, p.response) for p in peaks] == [(0, 1, 5.0)]


def test_peaks_match_brute_force_on_random_maps():
    rng = np.random.default_rng(21)
    for _ in range(50):
        m = rng.uniform(size=(20, 20)).astype(np.float32)
        got = [(p.y, p.x, p.response) for p in detect_peaks(m)]
        assert got == brute_force_peaks(m)


def test_seeds_fixture():
    m = np.array([[1.0, 1.0], [1.0, 5.0]], dtype=np.float32)  # mean 2
    seeds = seed_pixels_above_mean(m)
    assert [(p.y, p.x) for p in seeds] == [(1, 1)]


def test_seeds_constant_map_empty():
    assert seed_pixels_above_mean(np.ones((3, 3), dtype=np.float32)) == []


def test_seeds_match_loop_oracle():
    rng = np.random.default_rng(33)
    for _ in range(50):
        m = rng.normal(size=(14, 14)).astype(np.float32)
        got = [(p.y, p.x, p.response) for p in seed_pixels_above_mean(m)]
        assert got == brute_force_seeds(m)


def test_non_finite_map_rejected():
    m = np.ones((4, 4), dtype=np.float32)
    m[1, 1] = np.nan
    with pytest.raises(DataError):
        detect_peaks(m)


# ---------------------------------------------------------------------------
# single-layer back-propagation
# ---------------------------------------------------------------------------

def test_identity_conv_moves_delta_nowhere():
    weights = {}
    g = make_graph([conv("c1", "input", weights, np.ones((1, 1, 1, 1)))],
                   weights, (5, 5, 1))
    image = np.full((5, 5, 1), 2.0, dtype=np.float32)
    cache = forward(g, image)
    p_out = np.zeros((5, 5, 1))
    p_out[2, 3, 0] = 1.0
    (p_in,), dropped = backprop_layer(p_out, g.layer("c1"), g, cache)
    assert dropped == 0.0
    expected = np.zeros((5, 5, 1))
    expected[2, 3, 0] = 1.0
    np.testing.assert_allclose(p_in, expected, atol=1e-12)


def test_uniform_conv_spreads_delta_uniformly():
    weights = {}
    g = make_graph([conv("c1", "input", weights, np.ones((3, 3, 1, 1)),
                         pad=(1, 1))], weights, (5, 5, 1))
    image = np.full((5, 5, 1), 3.0, dtype=np.float32)
    cache = forward(g, image)
    p_out = np.zeros((5, 5, 1))
    p_out[2, 2, 0] = 1.0
    (p_in,), dropped = backprop_layer(p_out, g.layer("c1"), g, cache)
    assert dropped == 0.0
    np.testing.assert_allclose(p_in[1:4, 1:4, 0], np.full((3, 3), 1.0 / 9.0),
                               atol=1e-12)
    assert p_in.sum() == pytest.approx(1.0)


def test_backprop_layer_shape_mismatch():
    weights = {}
    g = make_graph([conv("c1", "input", weights, np.ones((1, 1, 1, 1)))],
                   weights, (4, 4, 1))
    cache = forward(g, np.ones((4, 4, 1), dtype=np.float32))
    with pytest.raises(ShapeMismatchError):
        backprop_layer(np.zeros((3, 3, 1)), g.layer("c1"), g, cache)


def test_chained_layers_match_exhaustive_oracle():
    rng = np.random.default_rng(4)
    weights = {}
    layers = [
        conv("c1", "input", weights, rng.normal(size=(3, 3, 2, 2)), pad=(1, 1)),
        LayerSpec("r1", "relu", ("c1",)),
        conv("c2", "r1", weights, rng.normal(size=(2, 2, 3, 2)), stride=(2, 2)),
    ]
    g = make_graph(layers, weights, (6, 6, 2))
    image = rng.uniform(-1, 2, size=(6, 6, 2)).astype(np.float32)
    cache = forward(g, image)
    mm = mean_activation_map(cache, g.start)
    peak = detect_peaks(mm)[0]
    got = backprop_peak(g, cache, peak)
    _, ref_map, ref_mass, ref_drops = oracle_backprop(g, cache, (peak.y, peak.x))
    np.testing.assert_allclose(got.values, ref_map, atol=1e-6)
    assert got.mass == pytest.approx(ref_mass, abs=1e-9)
    assert dict(got.dropped) == pytest.approx(dict(ref_drops), abs=1e-9)


def test_identity_chain_keeps_delta():
    g = identity_chain(depth=3, size=5)
    image = np.full((5, 5, 1), 1.0, dtype=np.float32)
    cache = forward(g, image)
    pm = backprop_peak(g, cache, Peak(4, 1, 1.0))
    expected = np.zeros((5, 5))
    expected[4, 1] = 1.0
    np.testing.assert_allclose(pm.values, expected, atol=1e-12)
    assert pm.mass == pytest.approx(1.0)


def test_uniform_input_single_conv_peak_map():
    weights = {}
    g = make_graph([conv("c1", "input", weights, np.ones((3, 3, 1, 1)))],
                   weights, (5, 5, 1))
    image = np.ones((5, 5, 1), dtype=np.float32)
    cache = forward(g, image)
    pm = backprop_peak(g, cache, Peak(1, 1, 9.0))
    # uniform patch over the receptive window, max-normalized to 1
    assert pm.values.max() == pytest.approx(1.0)
    np.testing.assert_allclose(pm.values[1:4, 1:4], np.ones((3, 3)), atol=1e-9)


def test_peak_outside_start_extent_rejected():
    g = identity_chain(depth=1, size=4)
    cache = forward(g, np.ones((4, 4, 1), dtype=np.float32))
    with pytest.raises(DataError):
        backprop_peak(g, cache, Peak(9, 0, 1.0))


def test_random_tiny_nets_match_oracle():
    rng = np.random.default_rng(99)
    done = 0
    while done < 30:
        graph, image = random_tiny_graph(rng)
        cache = forward(graph, image)
        mm = mean_activation_map(cache, graph.start)
        peaks = detect_peaks(mm)[:2]
        for peak in peaks:
            got = backprop_peak(graph, cache, peak)
            _, ref_map, ref_mass, ref_drops = oracle_backprop(
                graph, cache, (peak.y, peak.x))
            np.testing.assert_allclose(got.values, ref_map, atol=1e-6)
            assert got.mass == pytest.approx(ref_mass, abs=1e-6)
            assert got.dropped_total == pytest.approx(
                sum(m for _, m in ref_drops), abs=1e-6)
        done += 1


def test_residual_add_split_matches_oracle():
    rng = np.random.default_rng(17)
    weights = {}
    layers = [
        conv("ba", "input", weights, rng.normal(size=(3, 3, 2, 2)), pad=(1, 1)),
        conv("bb", "input", weights, rng.normal(size=(3, 3, 2, 2)), pad=(1, 1)),
        LayerSpec("join", "add", ("ba", "bb")),
        LayerSpec("out", "relu", ("join",)),
    ]
    g = make_graph(layers, weights, (6, 6, 2))
    image = rng.uniform(-1, 2, size=(6, 6, 2)).astype(np.float32)
    cache = forward(g, image)
    peak = detect_peaks(mean_activation_map(cache, "out"))[0]
    got = backprop_peak(g, cache, peak)
    _, ref_map, ref_mass, _ = oracle_backprop(g, cache, (peak.y, peak.x))
    np.testing.assert_allclose(got.values, ref_map, atol=1e-6)
    assert got.mass == pytest.approx(ref_mass, abs=1e-6)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def test_mass_never_increases_and_conserved_without_dead_ends():
    rng = np.random.default_rng(123)
    for _ in range(20):
        graph, image = random_tiny_graph(rng)
        cache = forward(graph, image)
        mm = mean_activation_map(cache, graph.start)
        peak = detect_peaks(mm)[0]
        pm = backprop_peak(graph, cache, peak)
        assert pm.mass <= 1.0 + 1e-6
        assert pm.mass >= -1e-12
        # mass + dropped accounts for the whole seed
        seeded = 0.0 if any(l == "seed" for l, _ in pm.dropped) else 1.0
        assert pm.mass + sum(m for l, m in pm.dropped if l != "seed") == \
            pytest.approx(seeded, abs=1e-9)


def test_scale_invariance_of_probability_maps():
    rng = np.random.default_rng(55)
    for _ in range(10):
        graph, image = random_tiny_graph(rng)
        cache = forward(graph, image)
        scaled_cache = {name: arr * np.float32(7.3)
                        for name, arr in cache.items()}
        mm = mean_activation_map(cache, graph.start)
        peak = detect_peaks(mm)[0]
        scaled_peak = Peak(peak.y, peak.x, peak.response * 7.3)
        a = backprop_peak(graph, cache, peak)
        b = backprop_peak(graph, scaled_cache, scaled_peak)
        np.testing.assert_allclose(a.values, b.values, atol=1e-6)
        assert a.mass == pytest.approx(b.mass, abs=1e-6)


def test_locality_zero_outside_receptive_field():
    rng = np.random.default_rng(77)
    for _ in range(15):
        graph, image = random_tiny_graph(rng, nonneg_input=True)
        cache = forward(graph, image)
        mm = mean_activation_map(cache, graph.start)
        peak = detect_peaks(mm)[0]
        pm = backprop_peak(graph, cache, peak)
        (y0, y1), (x0, x1) = input_receptive_field(graph, graph.start,
                                                   (peak.y, peak.x))
        outside = np.ones_like(pm.values, dtype=bool)
        outside[max(0, y0):y1 + 1, max(0, x0):x1 + 1] = False
        assert np.all(pm.values[outside] == 0.0)


def test_non_negative_and_deterministic():
    rng = np.random.default_rng(88)
    graph, image = random_tiny_graph(rng)
    cache = forward(graph, image)
    peak = detect_peaks(mean_activation_map(cache, graph.start))[0]
    a = backprop_peak(graph, cache, peak)
    b = backprop_peak(graph, cache, peak)
    assert np.all(a.values >= 0.0)
    assert np.array_equal(a.values, b.values)


def test_batched_seeds_equal_individual_runs():
    rng = np.random.default_rng(31)
    graph, image = random_tiny_graph(rng)
    cache = forward(graph, image)
    mm = mean_activation_map(cache, graph.start)
    seeds = seed_pixels_above_mean(mm)[:5]
    if not seeds:
        seeds = detect_peaks(mm)
    batched = backprop_seeds(graph, cache, seeds, chunk=2)
    for seed, pm in zip(seeds, batched):
        single = backprop_peak(graph, cache, seed)
        np.testing.assert_allclose(pm.values, single.values, atol=1e-12)
        assert pm.mass == pytest.approx(single.mass, abs=1e-12)
