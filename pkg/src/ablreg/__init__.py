"""ablreg: 2D US - CT/MRI registration toolkit for percutaneous liver
ablation guidance.

Subsystems: rigid geometry and pose errors, arm/probe calibration, volume
I/O and MPR, rigid point-cloud alignment, interactive TPS refinement,
slice-to-volume registration, evaluation metrics with synthetic oracles,
and the pipeline CLI / session service.
"""

from .geometry import PoseError, RigidTransform3D, compose, inverse, pose_error
from .volume import SlicePose, Volume, mpr_slice, sample_trilinear

__version__ = "0.1.0"

__all__ = [
    "PoseError",
    "RigidTransform3D",
    "SlicePose",
    "Volume",
    "compose",
    "inverse",
    "mpr_slice",
    "pose_error",
    "sample_trilinear",
    "__version__",
]
