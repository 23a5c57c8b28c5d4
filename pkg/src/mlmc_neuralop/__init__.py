"""Multi-level Monte Carlo training of neural operators on nested grid hierarchies."""
from .batcher import BatchPlan, plan_epoch
from .datagen import MultiResDataset, build_dataset, synthetic1d_dataset
from .mlmc import LevelSchedule, allocate_samples, batch_sizes, make_schedule, mlmc_grad, mlmc_loss
from .model import ModelConfig, SpectralOperator
from .multires import GridField, ResolutionLevel, build_hierarchy, grid_norm_sq, restrict
from .optim import OptimizerConfig, train

__all__ = [
    "BatchPlan", "GridField", "LevelSchedule", "ModelConfig", "MultiResDataset", "OptimizerConfig",
    "ResolutionLevel", "SpectralOperator", "allocate_samples", "batch_sizes", "build_dataset",
    "build_hierarchy", "grid_norm_sq", "make_schedule", "mlmc_grad", "mlmc_loss", "plan_epoch",
    "restrict", "synthetic1d_dataset", "train",
]
__version__ = "0.1.0"
