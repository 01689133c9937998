"""Patch-based diffusion models for unsupervised anomaly detection on slice volumes."""

from .config import RunConfig, desk_profile, full_scale_profile
from .data import DatasetSplit, VolumeTensor, generate_phantom, inject_anomaly
from .denoiser import DenoiserConfig, DenoiserModel
from .metrics import EvalReport, ScoreVector
from .noise import NoiseConfig
from .patching import PatchGrid, build_grid
from .pipeline import AnomalyMap, SliceDataset, TrainConfig
from .schedules import NoiseSchedule, make_linear_schedule

__all__ = [
    "AnomalyMap",
    "DatasetSplit",
    "DenoiserConfig",
    "DenoiserModel",
    "EvalReport",
    "NoiseConfig",
    "NoiseSchedule",
    "PatchGrid",
    "RunConfig",
    "ScoreVector",
    "SliceDataset",
    "TrainConfig",
    "VolumeTensor",
    "build_grid",
    "desk_profile",
    "full_scale_profile",
    "generate_phantom",
    "inject_anomaly",
    "make_linear_schedule",
]

__version__ = "0.1.0"
