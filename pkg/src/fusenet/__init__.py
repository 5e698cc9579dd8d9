"""Multimodal fusion training engine: CentralNet and baseline fusion models on a small autograd core."""

from .autograd import Graph, Tensor, backward, grad_check
from .data import MultimodalBatch, MultimodalDataset, SyntheticTaskSpec, gen_synthetic, load_features
from .models import (
    AlphaState,
    CentralNet,
    EarlyFusionNet,
    GMUNet,
    LateFusionNet,
    ModelSpec,
    UnimodalNet,
    alpha_report,
    build_model,
    central_fuse,
    global_loss,
    weighted_bce,
)

__version__ = "0.1.0"
