"""Deformable Gaussian reconstruction from posed, timed views."""

from .deform import DeformationField
from .loss import photometric_loss
from .model import GaussianCloud, load_checkpoint, render_model, save_checkpoint
from .optimize import ReconConfig, ReconResult, densify_prune, fit_static_proxy, optimize
from .rasterize import DEFAULT_BACKEND, available_backends, rasterize, rasterize_backward

__all__ = ["DeformationField", "photometric_loss", "GaussianCloud", "load_checkpoint",
           "render_model", "save_checkpoint", "ReconConfig", "ReconResult", "densify_prune",
           "fit_static_proxy", "optimize", "DEFAULT_BACKEND", "available_backends", "rasterize",
           "rasterize_backward"]
