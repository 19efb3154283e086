"""Lightweight blind image quality assessment.

Pipeline: random cropping -> unsupervised block-DCT/Saab representations ->
supervised relevant-feature selection -> distortion-specific routing ->
boosted-tree regression with a median decision ensemble.
"""

from .datasets import DatasetRecord, SplitPlan, load_manifest, split, synth_minidataset
from .errors import BiqaError
from .images import PlanarImage, SubImage, crop_random, decode, yuv_to_rgb
from .metrics import plcc, srocc
from .pipeline import (
    CropConfig,
    PipelineConfig,
    Prediction,
    TrainedModel,
    load,
    predict_batch,
    predict_image,
    save,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BiqaError",
    "CropConfig",
    "DatasetRecord",
    "PipelineConfig",
    "PlanarImage",
    "Prediction",
    "SplitPlan",
    "SubImage",
    "TrainedModel",
    "crop_random",
    "decode",
    "load",
    "load_manifest",
    "plcc",
    "predict_batch",
    "predict_image",
    "save",
    "split",
    "srocc",
    "synth_minidataset",
    "train",
    "yuv_to_rgb",
    "__version__",
]
