"""Portable weight container and graph description files.

Container layout (all integers little-endian):

    magic   4 bytes  "DASR"
    version u32      (currently 1)
    count   u32      number of tensors
    per tensor:
        name_len u32, name utf-8 bytes
        rank     u32, dims u32 * rank
        payload  float32 little-endian, row-major, prod(dims) values

Graph files are line-oriented text; ``#`` starts a comment. Records:

    version 1
    input <H> <W> <C>        # 0 for H or W accepts any extent
    mean <v> ...             # per channel, applied to [0,1]-scaled pixels
    scale <v> ...
    tap <layer>
    start <layer>
    layer <name> <kind> in=<src>[,<src>] [k=HxW] [s=HxW] [p=HxW] [w=<t>] [b=<t>]
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DuplicateTensorError,
    GraphCycleError,
    IOFormatError,
    TruncatedPayloadError,
    UnknownLayerKindError,
    UnresolvedRefError,
    VersionMismatchError,
)
from .graph import INPUT_NAME, LAYER_KINDS, LayerSpec, NetworkGraph, Preprocessing

MAGIC = b"DASR"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class WeightContainer:
    """Tensors in file order plus payload checksums."""

    tensors: dict[str, np.ndarray]
    checksums: dict[str, str]
    file_sha256: str
    version: int = VERSION

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=_F32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_container(path) -> WeightContainer:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IOFormatError(f"cannot read container {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(
            f"{path}: container version {version}, this reader supports {VERSION}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    checksums: dict[str, str] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedPayloadError(
                f"{path}: truncated at byte {off}, needed {n} more")
        piece = blob[off:off + n]
        off += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if any(d <= 0 for d in dims):
            raise IOFormatError(f"{path}: tensor {name!r} has non-positive dim")
        payload = take(4 * int(np.prod(dims)))
        if name in tensors:
            raise DuplicateTensorError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=_F32).reshape(dims).copy()
        checksums[name] = hashlib.sha256(payload).hexdigest()
    if off != len(blob):
        raise IOFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return WeightContainer(tensors, checksums, hashlib.sha256(blob).hexdigest())


def _parse_pair(token: str, what: str, line_no: int) -> tuple[int, int]:
    try:
        a, b = token.split("x")
        return int(a), int(b)
    except ValueError:
        raise IOFormatError(f"graph line {line_no}: bad {what} value {token!r}") from None


def parse_graph_text(text: str):
    """Parse graph text into (layers, input_shape, preprocessing, tap, start)."""
    layers: list[LayerSpec] = []
    header: dict[str, object] = {}
    records: list[tuple[int, str, dict]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key == "version":
            if int(parts[1]) != VERSION:
                raise VersionMismatchError(
                    f"graph line {line_no}: version {parts[1]} unsupported")
        elif key == "input":
            header["input"] = tuple(int(v) for v in parts[1:4])
        elif key in ("mean", "scale"):
            header[key] = tuple(float(v) for v in parts[1:])
        elif key in ("tap", "start"):
            header[key] = parts[1]
        elif key == "layer":
            if len(parts) < 4:
                raise IOFormatError(f"graph line {line_no}: incomplete layer record")
            name, kind = parts[1], parts[2]
            if kind not in LAYER_KINDS:
                raise UnknownLayerKindError(
                    f"graph line {line_no}: unknown layer kind {kind!r}")
            fields = {}
            for token in parts[3:]:
                if "=" not in token:
                    raise IOFormatError(
                        f"graph line {line_no}: malformed field {token!r}")
                k, v = token.split("=", 1)
                fields[k] = v
            records.append((line_no, name, {"kind": kind, **fields}))
        else:
            raise IOFormatError(f"graph line {line_no}: unknown record {key!r}")
    for need in ("input", "mean", "scale", "tap", "start"):
        if need not in header:
            raise IOFormatError(f"graph file missing {need!r} record")
    all_names = {name for _, name, _ in records}
    defined: set[str] = set()
    for line_no, name, fields in records:
        inputs = tuple(fields.get("in", "").split(",")) if fields.get("in") else ()
        for src in inputs:
            if src == INPUT_NAME or src in defined:
                continue
            if src in all_names or src == name:
                raise GraphCycleError(
                    f"graph line {line_no}: layer {name!r} input {src!r} is "
                    f"not defined earlier (cycle or forward reference)")
            raise UnresolvedRefError(
                f"graph line {line_no}: layer {name!r} input {src!r} is undefined")
        kernel = _parse_pair(fields["k"], "kernel", line_no) if "k" in fields else None
        stride = _parse_pair(fields["s"], "stride", line_no) if "s" in fields else None
        padding = _parse_pair(fields["p"], "padding", line_no) if "p" in fields else None
        layers.append(LayerSpec(name=name, kind=fields["kind"], inputs=inputs,
                                kernel=kernel, stride=stride, padding=padding,
                                weight=fields.get("w"), bias=fields.get("b")))
        defined.add(name)
    h, w, c = header["input"]
    if len(header["mean"]) != c or len(header["scale"]) != c:
        raise ConfigError("mean/scale length must match input channel count")
    return (tuple(layers), (h, w, c),
            Preprocessing(header["mean"], header["scale"]),
            header["tap"], header["start"])


def load_graph(path, container: WeightContainer) -> NetworkGraph:
    """Parse a graph file and bind its weight references to the container."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IOFormatError(f"cannot read graph {path}: {exc}") from exc
    layers, input_shape, preprocessing, tap, start = parse_graph_text(text)
    weights = {}
    for spec in layers:
        for ref in filter(None, (spec.weight, spec.bias)):
            if ref not in container:
                raise UnresolvedRefError(
                    f"layer {spec.name!r}: weight ref {ref!r} missing from container")
            weights[ref] = container[ref]
    return NetworkGraph(layers=layers, input_shape=input_shape,
                        preprocessing=preprocessing, tap=tap, start=start,
                        weights=weights)


def serialize_graph(graph: NetworkGraph) -> str:
    """Canonical text form; parse(serialize(g)) reproduces g exactly."""
    lines = [f"version {VERSION}",
             "input " + " ".join(str(v) for v in graph.input_shape),
             "mean " + " ".join(repr(float(v)) for v in graph.preprocessing.mean),
             "scale " + " ".join(repr(float(v)) for v in graph.preprocessing.scale),
             f"tap {graph.tap}",
             f"start {graph.start}"]
    for spec in graph.layers:
        parts = [f"layer {spec.name} {spec.kind}", "in=" + ",".join(spec.inputs)]
        if spec.kernel is not None:
            parts.append(f"k={spec.kernel[0]}x{spec.kernel[1]}")
            parts.append(f"s={spec.stride[0]}x{spec.stride[1]}")
            parts.append(f"p={spec.padding[0]}x{spec.padding[1]}")
        if spec.weight:
            parts.append(f"w={spec.weight}")
        if spec.bias:
            parts.append(f"b={spec.bias}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def write_graph(path, graph: NetworkGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_graph(graph))
