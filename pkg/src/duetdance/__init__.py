"""Music-driven two-person dance generation, tokenization, and evaluation."""

from .errors import DuetError
from .representation import DuetClip, FeatureStats, GlobalDuetMotion
from .skeleton import Skeleton, default_skeleton

__all__ = [
    "DuetError",
    "DuetClip",
    "FeatureStats",
    "GlobalDuetMotion",
    "Skeleton",
    "default_skeleton",
]
