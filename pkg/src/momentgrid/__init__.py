"""Desk-scale moment retrieval over sparse 2-D temporal candidate grids."""

from .config import EvalConfig, ModelConfig, TrainConfig
from .grid import CandidateGrid, build_grid, span_of_block, temporal_iou

__all__ = [
    "CandidateGrid",
    "EvalConfig",
    "ModelConfig",
    "TrainConfig",
    "build_grid",
    "span_of_block",
    "temporal_iou",
]
