"""Tiny search agent trained by alternating GRPO rounds and on-policy self-distillation."""

from .codec import RolloutRecord, Trajectory, encode, parse_trajectory, serialize_trajectory
from .config import PipelineConfig, load_config
from .environment import World, exact_match, generate_world, retrieve
from .model import AdapterSet, ModelConfig, Policy

__version__ = "0.1.0"

__all__ = [
    "AdapterSet", "ModelConfig", "PipelineConfig", "Policy", "RolloutRecord", "Trajectory", "World",
    "encode", "exact_match", "generate_world", "load_config", "parse_trajectory", "retrieve",
    "serialize_trajectory",
]
