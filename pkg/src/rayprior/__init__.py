"""Radiance fields with view-extrapolation priors: random ray casting and a
mesh-based ray atlas, on a small numpy core."""

from .config import ConfigError, RunConfig, load_config
from .estimator import RayPriorNeRF
from .field import FieldConfig, RadianceField
from .geometry import Camera, Ray, look_at, pose_distance, so3_exp, so3_log
from .mesh import RayAtlas, TriMesh, build_ray_atlas, extract_mesh
from .metrics import MetricReport, psnr, ssim
from .pipeline import run_experiment
from .render import composite, render_image, stratified_sample
from .rrc import perturb_ray, perturb_rays
from .scenes import Dataset, Frame, PoseSampler, checker_sphere, generate_dataset, load_dataset, split_by_distance
from .trainer import TrainSchedule, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Camera", "ConfigError", "Dataset", "FieldConfig", "Frame", "MetricReport", "PoseSampler",
    "RadianceField", "Ray", "RayAtlas", "RayPriorNeRF", "RunConfig", "TrainSchedule", "TriMesh",
    "build_ray_atlas", "checker_sphere", "composite", "extract_mesh", "generate_dataset",
    "load_config", "load_dataset", "look_at", "perturb_ray", "perturb_rays", "pose_distance",
    "psnr", "render_image", "run_experiment", "so3_exp", "so3_log", "split_by_distance", "ssim",
    "stratified_sample", "train_stage1", "train_stage2",
]
