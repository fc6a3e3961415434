"""Cross-domain CTR transfer with dual embeddings, built on a small autodiff core."""

from .autodiff import Tensor
from .config import RunConfig, load_config, parse_config
from .experiment import ExperimentPlan, SplitConfig, run_experiment
from .metrics import auc, imp
from .model import DomainModel, ModelConfig, SharedEmbedding, build_models, forward
from .report import render_experiment, render_report
from .schema import DomainSpec, FieldSpec, GlobalSchema, build_schema
from .synth import Dataset, GeneratorConfig, GroundTruth, generate
from .training import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "RunConfig", "load_config", "parse_config", "ExperimentPlan", "SplitConfig", "run_experiment",
    "auc", "imp", "render_experiment", "render_report", "DomainModel", "ModelConfig", "SharedEmbedding", "build_models", "forward",
    "DomainSpec", "FieldSpec", "GlobalSchema", "build_schema", "Dataset", "GeneratorConfig", "GroundTruth",
    "generate", "TrainConfig", "TrainState", "train",
]
