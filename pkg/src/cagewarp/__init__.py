"""Cage-based 3D shape deformation with differentiable mean value coordinates."""

__version__ = "0.1.0"

from .geometry import (
    MeshError,
    PointSet,
    SpatialIndex,
    Transform,
    TriMesh,
    compute_pca_frame,
    cot_laplacian,
    make_box_mesh,
    make_template_cage,
    normalize_to_unit_box,
    reflect_x,
    sample_surface,
)
from .gradients import Gradient, check_gradients, grad_deformed, grad_source_cage
from .losses import (
    LossBreakdown,
    LossWeights,
    cage_laplacian_loss,
    chamfer,
    eval_metrics,
    l2_corresponded,
    mvc_consistency,
    mvc_penalty,
    normal_loss,
    p2f_loss,
    shape_loss,
    symmetry_loss,
    total_loss,
)
from .meshio import load_mesh, load_points, save_mesh, save_points
from .mvc import MvcConfig, MvcError, MvcMatrix, compute_mvc, deform
from .optim import (
    AdamState,
    OptimReport,
    OptimizationError,
    PipelineConfig,
    adam_step,
    deform_pair,
    fit_cage,
    transfer,
)
from .toy import OffsetPredictor, SyntheticFamily, eval_toy, train_toy

__all__ = [
    "AdamState",
    "Gradient",
    "LossBreakdown",
    "LossWeights",
    "MeshError",
    "MvcConfig",
    "MvcError",
    "MvcMatrix",
    "OffsetPredictor",
    "OptimReport",
    "OptimizationError",
    "PipelineConfig",
    "PointSet",
    "SpatialIndex",
    "SyntheticFamily",
    "Transform",
    "TriMesh",
    "adam_step",
    "cage_laplacian_loss",
    "chamfer",
    "check_gradients",
    "compute_mvc",
    "compute_pca_frame",
    "cot_laplacian",
    "deform",
    "deform_pair",
    "eval_metrics",
    "eval_toy",
    "fit_cage",
    "grad_deformed",
    "grad_source_cage",
    "l2_corresponded",
    "load_mesh",
    "load_points",
    "make_box_mesh",
    "make_template_cage",
    "mvc_consistency",
    "mvc_penalty",
    "normal_loss",
    "normalize_to_unit_box",
    "p2f_loss",
    "reflect_x",
    "sample_surface",
    "save_mesh",
    "save_points",
    "shape_loss",
    "symmetry_loss",
    "total_loss",
    "train_toy",
    "transfer",
]
