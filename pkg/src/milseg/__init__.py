"""Weakly-supervised cancer-region segmentation.

Learns pixel-level (or superpixel-level) predictions from image-level
labels plus coarse area estimates: a small fully convolutional backbone
with multi-scale side outputs is trained under a multiple-instance
objective with generalized-mean pooling and area-constraint losses.
"""

from .backbone import (BackboneConfig, NetworkState, SideOutputs, build_network,
                       forward, load_checkpoint, receptive_field_report,
                       save_checkpoint)
from .evaluation import EvalReport, evaluate, f_measure, render_heatmap
from .losses import (Bag, LossBreakdown, LossWeights, area_constraint_loss,
                     mil_loss, predict_mask, side_loss, total_loss)
from .pooling import gm_pool, gm_pool_grad, hard_max_pool, positiveness
from .superpixels import SuperpixelMap, paint_instances, pool_to_superpixels, slic
from .synth import SynthBag, SynthSpec, TextureParams, generate, read_dataset, write_dataset
from .tensor import Tape, Tensor, backward
from .trainer import TrainConfig, TrainLog, adam_step, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "NetworkState", "SideOutputs", "build_network", "forward",
    "load_checkpoint", "receptive_field_report", "save_checkpoint",
    "EvalReport", "evaluate", "f_measure", "render_heatmap",
    "Bag", "LossBreakdown", "LossWeights", "area_constraint_loss", "mil_loss",
    "predict_mask", "side_loss", "total_loss",
    "gm_pool", "gm_pool_grad", "hard_max_pool", "positiveness",
    "SuperpixelMap", "paint_instances", "pool_to_superpixels", "slic",
    "SynthBag", "SynthSpec", "TextureParams", "generate", "read_dataset",
    "write_dataset",
    "Tape", "Tensor", "backward",
    "TrainConfig", "TrainLog", "adam_step", "train",
]
