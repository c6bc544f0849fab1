"""Query-based temporal and spatial fusion with a small reverse-mode tape."""

from .memory import MemoryQueue, Query, QueryBatch
from .model import Detection, FusionError, local_pass, spatial_fusion, temp_fusion_step
from .params import ModelParams

__all__ = [
    "Detection",
    "FusionError",
    "MemoryQueue",
    "ModelParams",
    "Query",
    "QueryBatch",
    "local_pass",
    "spatial_fusion",
    "temp_fusion_step",
]
