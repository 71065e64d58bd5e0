"""Siamese correlation tracker with an auxiliary instance-detection branch."""

from .geometry import Box, CropSizes, CropSpec, iou
from .model import BackboneConfig, LossWeights, TrackerNet, TrackerOutput
from .decode import Proposal, SelectConfig, track_sequence
from .synthdata import SamplerConfig, SceneScript, Sequence
from .trackeval import EvalConfig, EvalResult
from .perturb import SweepConfig, SweepGrid
from .train import TrainConfig, RunRecord

__all__ = [
    "Box", "CropSizes", "CropSpec", "iou",
    "BackboneConfig", "LossWeights", "TrackerNet", "TrackerOutput",
    "Proposal", "SelectConfig", "track_sequence",
    "SamplerConfig", "SceneScript", "Sequence",
    "EvalConfig", "EvalResult",
    "SweepConfig", "SweepGrid",
    "TrainConfig", "RunRecord",
]

__version__ = "0.1.0"
