"""Virtual template synthesis and matching relocalization."""
from .geometry import Pose, SearchBounds, StereoRig, compose, look_at, pose_error, project
from .localize import LocalizeOutcome, VtsmConfig, localize, multi_seed_localize
from .meshmap import MapPoint, SamplingMask, TexturedMesh, load_mesh, save_mesh
from .posesolve import Correspondence, ransac_align, stereo_triangulate, umeyama_align
from .renderer import ShadingSpec, render_frame, synthesize_template
from .scenegen import TerrainSpec, build_scene, generate_depot, load_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "Pose", "SearchBounds", "StereoRig", "compose", "look_at", "pose_error", "project",
    "LocalizeOutcome", "VtsmConfig", "localize", "multi_seed_localize",
    "MapPoint", "SamplingMask", "TexturedMesh", "load_mesh", "save_mesh",
    "Correspondence", "ransac_align", "stereo_triangulate", "umeyama_align",
    "ShadingSpec", "render_frame", "synthesize_template",
    "TerrainSpec", "build_scene", "generate_depot", "load_scene", "save_scene",
]
