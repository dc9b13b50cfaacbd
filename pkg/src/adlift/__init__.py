"""Strictly bounded, view-generalizing protection for Gaussian-splat scenes.

Safeguard Gaussians are trained with lifted PGD so every rendered view stays
inside an l-infinity ball around the unprotected render while pushing an
adversarial loss against small surrogate editing models.
"""

from .baselines import SoftConfig, fit2d, pgd_2d, soft_constraint_protect
from .evaluation import EvalReport, evaluate, sweep
from .lpgd import LpgdConfig, TrainLog, gradient_truncation, image_to_gaussian_fit, project_linf, protect
from .render import ParamGrads
from .scene import (
    Camera,
    Gaussians,
    Scene,
    SceneFormatError,
    bundled_cameras,
    bundled_scene,
    init_safeguard,
    load_scene,
    make_camera_ring,
    make_synthetic_scene,
    save_scene,
)
from .surrogate import AttackObjective, Surrogates

__version__ = "0.1.0"

__all__ = [
    "AttackObjective", "Camera", "EvalReport", "Gaussians", "LpgdConfig", "ParamGrads", "Scene",
    "SceneFormatError", "SoftConfig", "Surrogates", "TrainLog", "bundled_cameras", "bundled_scene", "evaluate",
    "fit2d", "gradient_truncation", "image_to_gaussian_fit", "init_safeguard", "load_scene", "make_camera_ring",
    "make_synthetic_scene", "pgd_2d", "project_linf", "protect", "save_scene",
    "soft_constraint_protect", "sweep",
]
