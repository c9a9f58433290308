"""Sliding-window backend: GP factors, marginalization and the LM solver."""

from .camera import CameraModel
from .factors import DistancePrior, PosePrior, huber, interval_index, project, project_batch
from .marginalization import MarginalPrior, MarginalizationPlan, dynamic_marginalization
from .window import Landmark, SlidingWindow, WindowParams

__all__ = [
    "CameraModel", "DistancePrior", "PosePrior", "huber", "interval_index", "project", "project_batch",
    "MarginalPrior", "MarginalizationPlan", "dynamic_marginalization",
    "Landmark", "SlidingWindow", "WindowParams",
]
