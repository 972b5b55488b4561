"""Low-rank weight rectification and scaling adapters for task-incremental learning."""

from .adapters import (
    ParamAudit,
    RectificationGenerator,
    ScalingFactorGenerator,
    TaskAdapterSet,
    audit,
    generate_rectification,
    init_adapter_set,
    overhead_conv,
    overhead_fc,
)
from .config import ConfigError, ExperimentConfig
from .data import generate_gzsl_tasks, generate_synthetic_tasks
from .estimator import RKRCadaVAE, RKRClassifier
from .gzsl import GzslConfig, GzslLearner, GzslMetrics, harmonic_mean, run_gzsl_sequence
from .model import AdaptedNetwork, BaseNetwork, LayerSpec, NetworkSpec, build_reference_net, resnet18_inventory
from .trainer import InvariantViolation, RunReport, TaskDataset, TrainConfig, run_sequence

__all__ = [
    "AdaptedNetwork",
    "BaseNetwork",
    "ConfigError",
    "ExperimentConfig",
    "GzslConfig",
    "GzslLearner",
    "GzslMetrics",
    "InvariantViolation",
    "LayerSpec",
    "NetworkSpec",
    "ParamAudit",
    "RKRCadaVAE",
    "RKRClassifier",
    "RectificationGenerator",
    "RunReport",
    "ScalingFactorGenerator",
    "TaskAdapterSet",
    "TaskDataset",
    "TrainConfig",
    "audit",
    "build_reference_net",
    "generate_gzsl_tasks",
    "generate_rectification",
    "generate_synthetic_tasks",
    "harmonic_mean",
    "init_adapter_set",
    "overhead_conv",
    "overhead_fc",
    "resnet18_inventory",
    "run_gzsl_sequence",
    "run_sequence",
]
