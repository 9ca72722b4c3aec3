"""Proposal-free nuclear instance segmentation: spatially aware
multi-scale dense networks, embedding clustering post-processing, and the
training/evaluation tooling around them."""

from .blocks import (
    MSBConfig,
    MSDUConfig,
    TransitionConfig,
    MultiScaleBlock,
    MultiScaleDenseUnit,
    DownTransition,
    UpTransition,
    receptive_field,
)
from .networks import (
    NetworkConfig,
    SpaNet,
    build_spanet,
    build_dual_head,
    count_parameters,
)
from .checkpoint import ModelWeights, FORMAT_TAG
from .config import ConfigError, RunConfig, DEFAULTS
from .data import DataError, Sample, SynthConfig, generate_synthetic, load_dataset
from .groundtruth import (
    PositionalTensor,
    binary_mask,
    build_instance_input,
    coordinate_maps,
    detection_gt,
    positional_gt,
)
from .losses import masked_smooth_l1, mse, smooth_jaccard
from .metrics import MetricsReport, aji, evaluate, f1_instances
from .postproc import Clump, PostprocParams, instance_segment, spectral_cluster
from .training import (
    DivergenceError,
    SWASchedule,
    TrainConfig,
    TrainResult,
    augment,
    cyclic_lr,
    recalibrate_norm_stats,
    swa_average,
    train_instance,
    train_segdet,
)

__all__ = [
    "MSBConfig",
    "MSDUConfig",
    "TransitionConfig",
    "MultiScaleBlock",
    "MultiScaleDenseUnit",
    "DownTransition",
    "UpTransition",
    "receptive_field",
    "NetworkConfig",
    "SpaNet",
    "build_spanet",
    "build_dual_head",
    "count_parameters",
    "ModelWeights",
    "FORMAT_TAG",
    "ConfigError",
    "RunConfig",
    "DEFAULTS",
    "DataError",
    "Sample",
    "SynthConfig",
    "generate_synthetic",
    "load_dataset",
    "PositionalTensor",
    "binary_mask",
    "build_instance_input",
    "coordinate_maps",
    "detection_gt",
    "positional_gt",
    "masked_smooth_l1",
    "mse",
    "smooth_jaccard",
    "MetricsReport",
    "aji",
    "evaluate",
    "f1_instances",
    "Clump",
    "PostprocParams",
    "instance_segment",
    "spectral_cluster",
    "DivergenceError",
    "SWASchedule",
    "TrainConfig",
    "TrainResult",
    "augment",
    "cyclic_lr",
    "recalibrate_norm_stats",
    "swa_average",
    "train_instance",
    "train_segdet",
]

__version__ = "0.1.0"
