"""Event-assisted 3D Gaussian splatting for low-light reconstruction.

A desk-scale, CPU-only pipeline: a differentiable splatting renderer with
analytic gradients, an event-camera forward model that turns image pairs
into noisy supervisory event streams, the triplet loss suite used to train
against dark frames plus events, and a synthetic turntable generator for
end-to-end experiments.
"""

from .errors import (ConfigurationError, CorruptFileError, DarksplatError,
                     InvalidParameterError, NumericDegeneracyError, ParseError,
                     TrainingDivergedError, UnsupportedVersionError)
from .scene import (Camera, GaussianCloud, ProjectedGaussians, build_covariance,
                    eval_sh, project_gaussians, quat_to_rotation)
from .render import (GradientSet, RenderGraph, backward, render, sort_by_depth,
                     splat_weight)
from .events import (Event, EventMap, EventModelParams, EventStream, accumulate,
                     counts_to_log, inject_dark_noise, load_events, log_map,
                     predicted_event_map, save_events, simulate_events,
                     y_noise_filter)
from .losses import (CtmbWeights, LossConfig, PseudoBrightPair,
                     PseudoBrightProvider, ctmb_forward, loss_event, loss_hol,
                     loss_mix, total_loss)
from .metrics import psnr, ssim
from .data import (Dataset, generate_turntable, load_dataset, load_scene,
                   save_dataset, save_scene)
from .train import (TrainConfig, TrainState, ablate, adam_step,
                    densify_and_prune, init_random_cloud, position_lr, train)

__version__ = "0.1.0"

__all__ = [
    "Camera", "GaussianCloud", "ProjectedGaussians", "GradientSet",
    "RenderGraph", "build_covariance", "eval_sh", "project_gaussians",
    "quat_to_rotation", "render", "backward", "sort_by_depth", "splat_weight",
    "Event", "EventMap", "EventModelParams", "EventStream", "accumulate",
    "counts_to_log", "inject_dark_noise", "load_events", "log_map",
    "predicted_event_map", "save_events", "simulate_events", "y_noise_filter",
    "CtmbWeights", "LossConfig", "PseudoBrightPair", "PseudoBrightProvider",
    "ctmb_forward", "loss_event", "loss_hol", "loss_mix", "total_loss",
    "psnr", "ssim",
    "Dataset", "generate_turntable", "load_dataset", "load_scene",
    "save_dataset", "save_scene",
    "TrainConfig", "TrainState", "ablate", "adam_step", "densify_and_prune",
    "init_random_cloud", "position_lr", "train",
    "DarksplatError", "InvalidParameterError", "NumericDegeneracyError",
    "ConfigurationError", "TrainingDivergedError", "ParseError",
    "CorruptFileError", "UnsupportedVersionError",
    "__version__",
]
