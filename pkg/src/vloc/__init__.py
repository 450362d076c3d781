"""Map-lite visual localization and image-goal navigation.

Builds a two-level topo-metric map from posed observations under a keyframe
budget, localizes a camera against it coarse-to-fine (retrieval ->
correspondence -> PnP -> pose-graph fusion), and closes the loop with
hierarchical planning inside a bundled deterministic grid-world simulator.
"""

from .geometry import CameraIntrinsics, Pose, se3_exp, se3_log

__all__ = ["CameraIntrinsics", "Pose", "se3_exp", "se3_log"]
__version__ = "0.1.0"
