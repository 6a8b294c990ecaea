"""Streaming Gaussian map: spawning, level-of-detail, splatting and refinement."""
from .io import read_ply, save_png, write_ply
from .primitives import SH_C0, GaussianMap, GaussianPrimitive, quat_to_matrix, rgb_to_sh, sh_to_rgb
from .refine import AdamState, RefineConfig, TrainingView, photometric_loss, refine, refine_step
from .render import RenderResult, lod_opacity, project_gaussians, render, render_backward
from .spawn import depth_tercile_levels, log_kernel, log_response, luminance, spawn_gaussians, spawn_probability

__all__ = [
    "AdamState", "GaussianMap", "GaussianPrimitive", "RefineConfig", "RenderResult", "SH_C0", "TrainingView",
    "depth_tercile_levels", "lod_opacity", "log_kernel", "log_response", "luminance", "photometric_loss",
    "project_gaussians", "quat_to_matrix", "read_ply", "refine", "refine_step", "render", "render_backward",
    "rgb_to_sh", "save_png", "sh_to_rgb", "spawn_gaussians", "spawn_probability", "write_ply",
]
