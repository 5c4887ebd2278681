"""Desk-scale vision-language model construction kit.

Tile-based image splitting, three vision-to-text connectors, self- and
cross-attention fusion over a tiny float64 autograd stack, a multi-stage
training schedule, a synthetic document-QA pipeline, and a VQA evaluation
harness. Everything is testable on one CPU core.
"""

from .autograd import Tensor, backward, finite_diff_check, tensor
from .image import RawImage, TileConfig, TileGrid, patchify, resize_longest_side, split_into_tiles
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "finite_diff_check",
    "RawImage",
    "TileConfig",
    "TileGrid",
    "patchify",
    "resize_longest_side",
    "split_into_tiles",
    "Vocabulary",
    "__version__",
]
