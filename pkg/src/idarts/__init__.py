"""Incremental differentiable architecture search for class-incremental learning."""

__version__ = "0.1.0"

from .continual import STRATEGIES, IncrementalLearner, StrategyConfig, TaskSchedule, strategy
from .errors import ConfigurationError, IngestionError, StageError, StateError
from .genotypes import AlphaTable, CellSpec, Genotype, infer_genotype
from .objectives import LossWeights, alpha_reg, ce_loss, idarts_loss, kd_loss
from .search import SearchConfig
from .supernet import ChildNet, SuperNet, derive_child, expand_head, param_count

__all__ = [
    "AlphaTable", "CellSpec", "ChildNet", "ConfigurationError", "Genotype", "IncrementalLearner",
    "IngestionError", "LossWeights", "STRATEGIES", "SearchConfig", "StageError", "StateError",
    "StrategyConfig", "SuperNet", "TaskSchedule", "alpha_reg", "ce_loss", "derive_child", "expand_head",
    "idarts_loss", "infer_genotype", "kd_loss", "param_count", "strategy",
]
