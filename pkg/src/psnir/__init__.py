"""Calibrated photometric stereo: Lambertian least squares and per-scene
unsupervised neural inverse rendering."""

from .baseline_ls import LsOptions, prior_normals, solve_least_squares
from .domain import (ImageStack, LightingSet, NormalMap, ObjectMask, Scene, SceneError,
                     ViewConfig, crop_to_bbox, normalize_intensity)
from .evaluator import error_map, evaluate, mean_angular_error, summarize_benchmark
from .trainer import TrainConfig, TrainTrace, run_median_protocol, train_scene

__version__ = "0.1.0"
