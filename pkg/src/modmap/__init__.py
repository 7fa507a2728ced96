"""Multiview, multimodal 3D anomaly detection via crossmodal feature mapping."""

from .config import RunConfig
from .encoders import EncoderConfig, FeatureMap, InstanceFeatures, ViewSample
from .geometry import CameraCalib
from .inference import AnomalyMapSet, infer_views
from .model import ModMapModel, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, train, train_multiclass
from .volume import GridSpec, VoxelGrid

__all__ = [
    "AnomalyMapSet",
    "CameraCalib",
    "EncoderConfig",
    "FeatureMap",
    "GridSpec",
    "InstanceFeatures",
    "ModMapModel",
    "RunConfig",
    "TrainConfig",
    "ViewSample",
    "VoxelGrid",
    "build_model",
    "infer_views",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "train_multiclass",
]

__version__ = "0.1.0"
