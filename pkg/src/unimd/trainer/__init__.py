"""Task-fusion training: subsampling, co-training samplers and fit loops."""
from .loop import (
    FitResult,
    MetricLog,
    StepLosses,
    TrainConfig,
    TrainingDiverged,
    batch_losses,
    fit,
    headline,
    make_optimizer,
    pretrain_finetune,
    train_step,
    video_task_losses,
)
from .sampling import (
    EmptyTaskError,
    SamplerMode,
    SamplerSpec,
    WorkItem,
    batch_task_tag,
    epoch_batches,
    iterate_batches,
    subsample,
    sync_violations,
)
