"""Depth refinement of mirror-symmetric objects from a single view."""

from .geometry import CameraPose, Quaternion, GeometryError
from .imaging import CorrespondenceSet, Flow1D, Scene, load_scene, save_scene
from .rectify import RectifyTransform, build_transform, rectify_image, lift_flow_to_correspondences
from .symmetry import MatcherConfig, FilterConfig, match_scanlines, consistency_filter
from .solver import SolverConfig, Tradeoffs, SolverError, refine
from .synth import NoiseSpec, SceneSpec, generate_scene, corrupt
from .metrics import depth_metrics, pose_metrics, symmetry_metrics, normal_metrics

__version__ = "0.1.0"
