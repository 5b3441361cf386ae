"""Contrast-phase recognition for abdominal CT by sampled-slice majority voting."""

__version__ = "0.1.0"

from .core import CtScan, CtSlice, PhaseLabel, RescaleSpec
from .model import LinearModelParams, TrainConfig, predict_slice, train
from .pipeline import SamplerConfig, ScanPrediction, predict_scan, sample_indices, vote
from .preprocess import FeatureConfig, WindowSpec, apply_window, extract_features, resize_bilinear

__all__ = [
    "CtScan", "CtSlice", "FeatureConfig", "LinearModelParams", "PhaseLabel", "RescaleSpec",
    "SamplerConfig", "ScanPrediction", "TrainConfig", "WindowSpec", "apply_window", "extract_features",
    "predict_scan", "predict_slice", "resize_bilinear", "sample_indices", "train", "vote",
]
