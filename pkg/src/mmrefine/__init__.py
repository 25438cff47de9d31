"""Camera-assisted refinement of mmWave radar point clouds."""

from .cfar import Detection, RangeDopplerMatrix, ca_cfar, os_cfar
from .errors import MMRefineError
from .geometry import CameraIntrinsics, FeatureTrack, RigidTransform
from .metrics import MetricReport, chamfer, evaluate, modified_hausdorff, rpcdl
from .pipeline import RunConfig, run, run_ablation
from .reconstruction import ReconstructionProblem, ReconstructionSolution, SolverOptions, solve
from .rigid_motion import PoseStream, ScenePointSet, ekf_fuse, kabsch, transform_consistency_loss
from .sim import SceneConfig, export, generate, load_scene, preset_config
from .spurious import PointCloudFrame, StabilityContext, mark_spurious

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "Detection",
    "FeatureTrack",
    "MMRefineError",
    "MetricReport",
    "PointCloudFrame",
    "PoseStream",
    "RangeDopplerMatrix",
    "ReconstructionProblem",
    "ReconstructionSolution",
    "RigidTransform",
    "RunConfig",
    "SceneConfig",
    "ScenePointSet",
    "SolverOptions",
    "StabilityContext",
    "ca_cfar",
    "chamfer",
    "ekf_fuse",
    "evaluate",
    "export",
    "generate",
    "kabsch",
    "load_scene",
    "mark_spurious",
    "modified_hausdorff",
    "os_cfar",
    "preset_config",
    "rpcdl",
    "run",
    "run_ablation",
    "solve",
    "transform_consistency_loss",
]
