"""Torchvision backbone walks: flatten ResNet-50 / VGG-16 into the engine's
graph grammar with all batch norms folded away.

The emitted graph stops at the back-propagation start layer (the last
convolution stage's output); classifier heads never appear. `capture_points`
pairs each comparable graph layer with the torch module whose output it must
reproduce, in topological order, for parity verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .fold import FoldRecord, fold_conv_bn, to_engine_layout

SUPPORTED = ("resnet50", "vgg16")

# torchvision ImageNet preprocessing constants (model card values)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_SCALE = (0.229, 0.224, 0.225)


@dataclass
class ExportedGraph:
    tensors: dict[str, np.ndarray]
    graph_text: str
    capture_points: list[tuple[str, str]]  # (graph layer, torch module path)
    folds: list[FoldRecord]
    tap: str
    start: str
    conv_count: int = 0


class _Builder:
    def __init__(self, tap: str, start: str):
        self.lines: list[str] = []
        self.tensors: dict[str, np.ndarray] = {}
        self.folds: list[FoldRecord] = []
        self.captures: list[tuple[str, str]] = []
        self.tap = tap
        self.start = start
        self.conv_count = 0

    def conv(self, name, src, weight, bias, kernel, stride, padding):
        self.tensors[f"{name}.w"] = to_engine_layout(weight)
        self.tensors[f"{name}.b"] = bias
        self.lines.append(
            f"layer {name} conv in={src} k={kernel[0]}x{kernel[1]} "
            f"s={stride[0]}x{stride[1]} p={padding[0]}x{padding[1]} "
            f"w={name}.w b={name}.b")
        self.conv_count += 1
        return name

    def folded_conv(self, name, src, conv_mod, bn_mod, conv_path, bn_path):
        weight, bias = fold_conv_bn(conv_mod, bn_mod)
        self.folds.append(FoldRecord(conv=conv_path, bn=bn_path,
                                     eps=float(bn_mod.eps)))
        self.conv(name, src, weight, bias, conv_mod.kernel_size,
                  conv_mod.stride, conv_mod.padding)
        self.captures.append((name, bn_path))
        return name

    def relu(self, name, src):
        self.lines.append(f"layer {name} relu in={src}")
        return name

    def maxpool(self, name, src, mod, path=None):
        k = mod.kernel_size if isinstance(mod.kernel_size, tuple) else \
            (mod.kernel_size, mod.kernel_size)
        s = mod.stride if isinstance(mod.stride, tuple) else \
            (mod.stride, mod.stride)
        p = mod.padding if isinstance(mod.padding, tuple) else \
            (mod.padding, mod.padding)
        self.lines.append(f"layer {name} maxpool in={src} "
                          f"k={k[0]}x{k[1]} s={s[0]}x{s[1]} p={p[0]}x{p[1]}")
        if path:
            self.captures.append((name, path))
        return name

    def add(self, name, a, b):
        self.lines.append(f"layer {name} add in={a},{b}")
        return name

    def graph_text(self) -> str:
        header = [
            "version 1",
            "input 0 0 3",
            "mean " + " ".join(repr(v) for v in IMAGENET_MEAN),
            "scale " + " ".join(repr(v) for v in IMAGENET_SCALE),
            f"tap {self.tap}",
            f"start {self.start}",
        ]
        return "\n".join(header + self.lines) + "\n"

    def done(self) -> ExportedGraph:
        return ExportedGraph(tensors=self.tensors,
                             graph_text=self.graph_text(),
                             capture_points=self.captures, folds=self.folds,
                             tap=self.tap, start=self.start,
                             conv_count=self.conv_count)


def walk_resnet50(model: torch.nn.Module) -> ExportedGraph:
    """Flatten torchvision ResNet-50 through layer4, folding every BN.

    Tap is the first unit of the final stage (post-activation); the
    back-propagation start is the final stage's last unit output.
    """
    b = _Builder(tap="l4b0out", start="l4b2out")
    prev = b.folded_conv("conv1", "input", model.conv1, model.bn1,
                         "conv1", "bn1")
    prev = b.relu("relu1", prev)
    prev = b.maxpool("pool1", prev, model.maxpool, "maxpool")
    for stage in range(1, 5):
        blocks = getattr(model, f"layer{stage}")
        for bi, block in enumerate(blocks):
            base = f"l{stage}b{bi}"
            tpath = f"layer{stage}.{bi}"
            c1 = b.folded_conv(f"{base}c1", prev, block.conv1, block.bn1,
                               f"{tpath}.conv1", f"{tpath}.bn1")
            r1 = b.relu(f"{base}r1", c1)
            c2 = b.folded_conv(f"{base}c2", r1, block.conv2, block.bn2,
                               f"{tpath}.conv2", f"{tpath}.bn2")
            r2 = b.relu(f"{base}r2", c2)
            c3 = b.folded_conv(f"{base}c3", r2, block.conv3, block.bn3,
                               f"{tpath}.conv3", f"{tpath}.bn3")
            if block.downsample is not None:
                identity = b.folded_conv(
                    f"{base}down", prev, block.downsample[0],
                    block.downsample[1], f"{tpath}.downsample.0",
                    f"{tpath}.downsample.1")
            else:
                identity = prev
            joined = b.add(f"{base}add", c3, identity)
            prev = b.relu(f"{base}out", joined)
            b.captures.append((f"{base}out", tpath))
    return b.done()


def walk_vgg16(model: torch.nn.Module) -> ExportedGraph:
    """Flatten torchvision VGG-16 features through the fifth pooling layer."""
    b = _Builder(tap="r5_3", start="pool5")
    prev = "input"
    block, conv_i = 1, 0
    for idx, mod in enumerate(model.features):
        path = f"features.{idx}"
        if isinstance(mod, torch.nn.Conv2d):
            conv_i += 1
            name = f"conv{block}_{conv_i}"
            with torch.no_grad():
                weight = mod.weight.float().numpy()
                bias = mod.bias.float().numpy() if mod.bias is not None else \
                    np.zeros(mod.out_channels, dtype=np.float32)
            prev = b.conv(name, prev, weight, bias, mod.kernel_size,
                          mod.stride, mod.padding)
            b.captures.append((name, path))
        elif isinstance(mod, torch.nn.ReLU):
            prev = b.relu(f"r{block}_{conv_i}", prev)
            b.captures.append((f"r{block}_{conv_i}", path))
        elif isinstance(mod, torch.nn.MaxPool2d):
            prev = b.maxpool(f"pool{block}", prev, mod, path)
            block += 1
            conv_i = 0
        else:
            raise ValueError(f"unsupported VGG module {type(mod).__name__}")
    return b.done()


def build_model(model_name: str, seed: int = 0, checkpoint=None,
                pretrained: bool = False) -> torch.nn.Module:
    """Instantiate the torchvision backbone deterministically.

    Without a checkpoint or pretrained weights the model keeps its fixed-seed
    random initialization, which is sufficient for format and parity work.
    """
    import torchvision.models as tvm

    if model_name not in SUPPORTED:
        raise ValueError(f"unsupported architecture {model_name!r}; "
                         f"supported: {', '.join(SUPPORTED)}")
    torch.manual_seed(seed)
    if model_name == "resnet50":
        model = tvm.resnet50(weights=tvm.ResNet50_Weights.IMAGENET1K_V1
                             if pretrained else None)
    else:
        model = tvm.vgg16(weights=tvm.VGG16_Weights.IMAGENET1K_V1
                          if pretrained else None)
    if checkpoint is not None:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model


def walk(model_name: str, model: torch.nn.Module) -> ExportedGraph:
    if model_name == "resnet50":
        return walk_resnet50(model)
    return walk_vgg16(model)
