"""Stereo superpixel segmentation with parallax-attention fusion and spatial embedding."""

__version__ = "0.1.0"

from .core import (FeatureMap, StereoPair, SuperpixelMap, ValidationError, lab_to_rgb,
                   load_pair, rgb_to_lab)
from .estimator import SaliencyDetector, StereoSuperpixelSegmenter
from .metrics import asa, benchmark, br, ue
from .model import ABLATION_PRESETS, Ablation, StereoSuperpixelNet, segment_pair
from .trainer import TrainConfig, train, train_model

__all__ = [
    "ABLATION_PRESETS", "Ablation", "FeatureMap", "SaliencyDetector", "StereoPair",
    "StereoSuperpixelNet", "StereoSuperpixelSegmenter", "SuperpixelMap", "TrainConfig",
    "ValidationError", "asa", "benchmark", "br", "lab_to_rgb", "load_pair", "rgb_to_lab",
    "segment_pair", "train", "train_model", "ue",
]
