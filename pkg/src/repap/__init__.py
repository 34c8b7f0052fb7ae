"""Physics-aligned diffusion: train generative models whose intermediate
representations decode into physical fields with small PDE residuals.

The pieces compose bottom-up: residual operators on grids (residuals, fem),
data generators (grf, datagen, simp), containers and masks (fields), the
diffusion core (diffusion), backbones with feature taps (backbones),
projection heads and the combined loss (alignment), task plumbing (tasks),
the training loop (training), metrics and diagnostics, and a CLI.
"""

from .alignment import (
    AlignmentConfig,
    HeadSet,
    ProjectionHead,
    TrainedModel,
    discard_heads,
    midlayer_physics_loss,
    output_physics_loss,
    project_features,
    total_loss,
)
from .backbones import DiTConfig, UNetConfig, make_backbone
from .config import (
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    desk_preset,
    load_config,
    paper_preset,
    save_config,
    with_seed,
)
from .diffusion import (
    EmaState,
    NoiseSchedule,
    data_loss,
    forward_diffuse,
    load_checkpoint,
    make_cosine_schedule,
    reverse_step,
    save_checkpoint,
    schedule_from_beta,
)
from .fields import (
    BinaryMask,
    DatasetContainer,
    Field,
    Grid2D,
    make_observation_mask,
    read_dataset,
    write_dataset,
)
from .tasks import (
    TASK_CHANNELS,
    TASK_CONDITIONING,
    TASKS,
    ChannelNormalizer,
    TaskContext,
    context_from_container,
    generation_residual,
    residual_abs_mean,
    residual_sq_norm,
    split_container,
)
from .training import (
    RunRecord,
    TrainResult,
    load_trained,
    sample_loop,
    set_determinism,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "BinaryMask",
    "ChannelNormalizer",
    "DatasetContainer",
    "DiTConfig",
    "EmaState",
    "ExperimentConfig",
    "Field",
    "Grid2D",
    "HeadSet",
    "NoiseSchedule",
    "ProjectionHead",
    "RunRecord",
    "TASK_CHANNELS",
    "TASK_CONDITIONING",
    "TASKS",
    "TaskContext",
    "TrainResult",
    "TrainedModel",
    "UNetConfig",
    "config_from_dict",
    "config_hash",
    "config_to_dict",
    "context_from_container",
    "data_loss",
    "desk_preset",
    "discard_heads",
    "forward_diffuse",
    "generation_residual",
    "load_checkpoint",
    "load_config",
    "load_trained",
    "make_backbone",
    "make_cosine_schedule",
    "make_observation_mask",
    "midlayer_physics_loss",
    "output_physics_loss",
    "paper_preset",
    "project_features",
    "read_dataset",
    "residual_abs_mean",
    "residual_sq_norm",
    "reverse_step",
    "sample_loop",
    "save_checkpoint",
    "save_config",
    "schedule_from_beta",
    "set_determinism",
    "split_container",
    "total_loss",
    "train",
    "with_seed",
    "write_dataset",
]
