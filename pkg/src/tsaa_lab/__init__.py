"""Two-stage anchor assignment and the anchor-drift diagnostic on synthetic crowds."""

__version__ = "0.1.0"

from .assignment import AssignerConfig, baseline_assign, tsaa_assign
from .geometry import Box, iou
from .scenes import Scene, SceneGenConfig, generate_scenes

__all__ = ["AssignerConfig", "Box", "Scene", "SceneGenConfig", "baseline_assign",
           "generate_scenes", "iou", "tsaa_assign", "__version__"]
