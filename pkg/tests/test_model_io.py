"""Container and graph-file round trips plus the distinct failure modes."""

import struct

import numpy as np
import pytest

from dasr import load_container, load_graph, parse_graph_text, serialize_graph, write_container, write_graph
from dasr.errors import (
    BadMagicError,
    DuplicateTensorError,
    GraphCycleError,
    TruncatedPayloadError,
    UnknownLayerKindError,
    UnresolvedRefError,
    VersionMismatchError,
)

from helpers import conv, make_graph

MINIMAL_GRAPH = """\
# desk-scale test net
version 1
input 4 4 1
mean 0.0
scale 1.0
tap c1
start r1
layer c1 conv in=input k=1x1 s=1x1 p=0x0 w=c1.w
layer r1 relu in=c1
"""


def test_container_roundtrip_single_value(tmp_path):
    path = tmp_path / "w.dasrc"
    write_container(path, {"t": np.full((1, 1, 1, 1), 2.5, dtype=np.float32)})
    loaded = load_container(path)
    assert list(loaded.tensors) == ["t"]
    assert loaded["t"].shape == (1, 1, 1, 1)
    assert loaded["t"][0, 0, 0, 0] == pytest.approx(2.5)


def test_container_write_load_write_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "conv1.w": rng.normal(size=(3, 3, 4, 2)).astype(np.float32),
        "conv1.b": rng.normal(size=4).astype(np.float32),
        "odd/name with spaces": rng.normal(size=(5,)).astype(np.float32),
    }
    first = tmp_path / "a.dasrc"
    second = tmp_path / "b.dasrc"
    write_container(first, tensors)
    loaded = load_container(first)
    write_container(second, loaded.tensors)
    assert first.read_bytes() == second.read_bytes()


def test_container_bad_magic(tmp_path):
    path = tmp_path / "bad.dasrc"
    path.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(BadMagicError):
        load_container(path)


def test_container_version_mismatch(tmp_path):
    path = tmp_path / "v9.dasrc"
    path.write_bytes(b"DASR" + struct.pack("<II", 9, 0))
    with pytest.raises(VersionMismatchError):
        load_container(path)


def test_container_truncated_payload(tmp_path):
    path = tmp_path / "w.dasrc"
    write_container(path, {"t": np.ones(8, dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(TruncatedPayloadError):
        load_container(path)


def test_container_duplicate_name(tmp_path):
    path = tmp_path / "dup.dasrc"
    body = b""
    for _ in range(2):
        body += struct.pack("<I", 1) + b"t"
        body += struct.pack("<II", 1, 1)
        body += struct.pack("<f", 1.0)
    path.write_bytes(b"DASR" + struct.pack("<II", 1, 2) + body)
    with pytest.raises(DuplicateTensorError):
        load_container(path)


def test_minimal_graph_parses(tmp_path):
    container_path = tmp_path / "w.dasrc"
    write_container(container_path, {"c1.w": np.ones((1, 1, 1, 1), np.float32)})
    graph_path = tmp_path / "g.txt"
    graph_path.write_text(MINIMAL_GRAPH)
    graph = load_graph(graph_path, load_container(container_path))
    assert len(graph.layers) == 2
    assert graph.tap == "c1"
    assert graph.start == "r1"
    assert graph.input_shape == (4, 4, 1)


def test_graph_missing_tensor_names_the_ref(tmp_path):
    container_path = tmp_path / "w.dasrc"
    write_container(container_path, {"other.w": np.ones((1, 1, 1, 1), np.float32)})
    graph_path = tmp_path / "g.txt"
    graph_path.write_text(MINIMAL_GRAPH.replace("w=c1.w", "w=convX.w"))
    with pytest.raises(UnresolvedRefError, match="convX.w"):
        load_graph(graph_path, load_container(container_path))


def test_graph_unknown_kind():
    with pytest.raises(UnknownLayerKindError):
        parse_graph_text(MINIMAL_GRAPH.replace("relu", "swish"))


def test_graph_forward_reference_is_cycle_error():
    text = MINIMAL_GRAPH.replace("layer c1 conv in=input",
                                 "layer c1 conv in=r1")
    with pytest.raises(GraphCycleError):
        parse_graph_text(text)


def test_graph_undefined_input_ref():
    text = MINIMAL_GRAPH.replace("layer r1 relu in=c1",
                                 "layer r1 relu in=ghost")
    with pytest.raises(UnresolvedRefError, match="ghost"):
        parse_graph_text(text)


def test_graph_serialize_parse_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    weights = {}
    from dasr import LayerSpec

    layers = [
        conv("c1", "input", weights, rng.normal(size=(3, 3, 2, 3)),
             b=rng.normal(size=2), stride=(2, 2), pad=(1, 1)),
        LayerSpec("r1", "relu", ("c1",)),
        conv("c2", "r1", weights, rng.normal(size=(1, 1, 2, 2))),
        LayerSpec("s", "add", ("r1", "c2")),
        LayerSpec("p", "maxpool", ("s",), kernel=(2, 2), stride=(2, 2),
                  padding=(0, 0)),
    ]
    graph = make_graph(layers, weights, (8, 8, 3), tap="c1", start="p",
                       mean=[0.5, 0.5, 0.5], scale=[0.25, 0.25, 0.25])
    text = serialize_graph(graph)
    reparsed = parse_graph_text(text)
    assert reparsed[0] == graph.layers
    assert reparsed[1] == graph.input_shape
    assert reparsed[2] == graph.preprocessing
    assert (reparsed[3], reparsed[4]) == (graph.tap, graph.start)
    assert serialize_graph(make_graph(list(reparsed[0]), weights, reparsed[1],
                                      tap=reparsed[3], start=reparsed[4],
                                      mean=list(reparsed[2].mean),
                                      scale=list(reparsed[2].scale))) == text


def test_write_graph_file_roundtrip(tmp_path):
    weights = {"c1.w": np.ones((1, 1, 1, 1), np.float32)}
    from dasr import LayerSpec

    layers = [LayerSpec("c1", "conv", ("input",), (1, 1), (1, 1), (0, 0), "c1.w"),
              LayerSpec("r1", "relu", ("c1",))]
    graph = make_graph(layers, weights, (4, 4, 1))
    gpath = tmp_path / "g.txt"
    cpath = tmp_path / "w.dasrc"
    write_graph(gpath, graph)
    write_container(cpath, weights)
    again = load_graph(gpath, load_container(cpath))
    assert again.layers == graph.layers
    assert serialize_graph(again) == serialize_graph(graph)


def test_checksums_reported(tmp_path):
    path = tmp_path / "w.dasrc"
    write_container(path, {"t": np.zeros(3, dtype=np.float32)})
    loaded = load_container(path)
    assert set(loaded.checksums) == {"t"}
    assert len(loaded.file_sha256) == 64
