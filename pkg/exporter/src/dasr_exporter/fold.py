"""Batch-normalization folding into the preceding convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class FoldRecord:
    conv: str
    bn: str
    eps: float


def fold_conv_bn(conv: torch.nn.Conv2d, bn: torch.nn.BatchNorm2d
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Return (weight, bias) of the equivalent single convolution.

    weight' = gamma / sqrt(var + eps) * weight, applied per output channel;
    bias'   = gamma * (bias - mean) / sqrt(var + eps) + beta.
    eps is taken from the checkpoint's own module.
    """
    with torch.no_grad():
        gamma = bn.weight.double()
        beta = bn.bias.double()
        mean = bn.running_mean.double()
        var = bn.running_var.double()
        scale = gamma / torch.sqrt(var + bn.eps)
        weight = conv.weight.double() * scale.reshape(-1, 1, 1, 1)
        bias = conv.bias.double() if conv.bias is not None else \
            torch.zeros_like(mean)
        bias = (bias - mean) * scale + beta
    return (weight.float().numpy(), bias.float().numpy())


def to_engine_layout(weight: np.ndarray) -> np.ndarray:
    """torch (Cout, Cin, Hf, Wf) -> engine (Hf, Wf, Cout, Cin)."""
    return np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
