//! Schedules, optimizers, the baseline teacher trainer and the distillation loop.

mod batch;
mod metrics;
mod optim;
mod run;
mod schedule;
mod state;
mod step;

pub use batch::{batch_indices, make_views, step_batch};
pub use metrics::{mean_pairwise_cosine, teacher_student_kl};
pub use optim::{decays, global_norm, optimizer_step, Algorithm, OptimSpec, OptimState};
pub use run::{
    latest_state, read_metrics, run_baseline, run_distillation, LoopOptions, MetricRecord,
    CHECKPOINT_DIR, METRICS_FILE,
};
pub use schedule::{schedule_value, ScheduleKind, ScheduleSpec};
pub use state::{
    restore_baseline_state, restore_distill_state, save_baseline_state, save_distill_state,
    StateKind, STATE_MAGIC,
};
pub use step::{
    attach_masks, baseline_ssl_step, check_compatible, distill_step, ema_update, student_forward,
    teacher_scores, BaselineSslConfig, BaselineState, DistillState, StepMetrics, StudentPass,
};
