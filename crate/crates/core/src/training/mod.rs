//! Cross-entropy training with Adam, global-norm clipping, TBPTT with a
//! detached carried state, learning-rate schedules, evaluation, and
//! checkpoints.

mod checkpoint;
mod eval;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CheckpointHeader, MAGIC, VERSION};
pub use eval::{eval_threads, evaluate, log_probs, probabilities, score_positions};
pub use optim::{bpc, clip_gradients, global_grad_norm, Adam, AdamConfig, ClipReport, LrSchedule, ScheduleKind};
pub use trainer::{
    forward_window, train, window_gradients, window_loss, Event, MetricRow, NoHooks, Precision,
    Progress, TrainConfig, TrainHooks, Trainer, WindowReport,
};
pub(crate) use eval::check_vocab;
