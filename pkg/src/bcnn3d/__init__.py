"""3D Bayesian CNN for volumetric binary segmentation with uncertainty maps."""

from .chunking import ChunkSet, ChunkSpec, chunk, coverage_counts
from .inference import InferenceConfig, UncertaintyBundle, predict, probe_intervals
from .metrics import MetricsReport, PatchConfig, evaluate, pavpu3d
from .model import ArchConfig, ModelState, build, forward
from .training import AnnealSchedule, TrainConfig, kl_weight, train
from .volume import normalize, voxel_accuracy

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "ArchConfig",
    "ChunkSet",
    "ChunkSpec",
    "InferenceConfig",
    "MetricsReport",
    "ModelState",
    "PatchConfig",
    "TrainConfig",
    "UncertaintyBundle",
    "build",
    "chunk",
    "coverage_counts",
    "evaluate",
    "forward",
    "kl_weight",
    "normalize",
    "pavpu3d",
    "predict",
    "probe_intervals",
    "train",
    "voxel_accuracy",
]
