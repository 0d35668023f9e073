"""Surrogate modelling and uncertainty quantification for two-phase subsurface flow.

The package spans the full workflow: sampling log-Gaussian permeability
fields, simulating injection with a two-phase finite-volume solver, packing
snapshots into datasets, training a dense convolutional surrogate with a
hand-written backward pass, and comparing Monte Carlo statistics of the
surrogate against the simulator. ``python -m surroflow.cli`` drives the same
steps from the command line.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_env_overrides, preset
from .dataset import FlowDataset, Normalization, derive_field_seed, generate_split
from .errors import (
    ArchitectureError,
    ConfigError,
    DataError,
    GeometryError,
    NumericalError,
    SurroflowError,
)
from .grf import FieldSampler, GridSpec, GrfParams, PermeabilityField, sample_field
from .network import NetworkConfig, SurrogateNet, build_network
from .simulator import SimConfig, Snapshot, rescale_pressure, simulate
from .training import (
    Adam,
    PlateauScheduler,
    TrainConfig,
    TrainRecord,
    bce_loss,
    mask_iou,
    metrics_r2_rmse,
    mse_loss,
    mse_only_train,
    predict,
    train_two_stage,
)
from .uq import (
    MomentFields,
    PdfEstimate,
    compare_uq,
    ensemble_pass,
    estimate_pdf,
    mc_moments,
    mc_pdf,
    pdf_l1_distance,
    relative_l2,
    simulator_evaluator,
    surrogate_evaluator,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ArchitectureError",
    "ConfigError",
    "DataError",
    "FieldSampler",
    "FlowDataset",
    "GeometryError",
    "GridSpec",
    "GrfParams",
    "MomentFields",
    "NetworkConfig",
    "Normalization",
    "NumericalError",
    "PdfEstimate",
    "PermeabilityField",
    "PlateauScheduler",
    "RunConfig",
    "SimConfig",
    "Snapshot",
    "SurroflowError",
    "SurrogateNet",
    "TrainConfig",
    "TrainRecord",
    "apply_env_overrides",
    "bce_loss",
    "build_network",
    "compare_uq",
    "derive_field_seed",
    "ensemble_pass",
    "estimate_pdf",
    "generate_split",
    "load_checkpoint",
    "mask_iou",
    "mc_moments",
    "mc_pdf",
    "metrics_r2_rmse",
    "mse_loss",
    "mse_only_train",
    "pdf_l1_distance",
    "predict",
    "preset",
    "relative_l2",
    "rescale_pressure",
    "sample_field",
    "save_checkpoint",
    "simulate",
    "simulator_evaluator",
    "surrogate_evaluator",
    "train_two_stage",
    "__version__",
]
