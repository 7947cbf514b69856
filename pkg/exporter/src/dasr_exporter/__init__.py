"""Checkpoint exporter: torchvision backbones -> DASR containers."""

from .backbones import SUPPORTED, build_model, walk
from .export import export
from .fold import fold_conv_bn, to_engine_layout
from .verify import VerifyReport, verify

__version__ = "0.1.0"
