//! Run configuration, presets, the teacher registry and the four commands.

pub mod commands;
pub mod config;
pub mod presets;
pub mod registry;

pub use commands::{
    cmd_ablate, cmd_distill, cmd_evaluate, cmd_train_teacher, load_verified, save_verified,
    AblationAxis, AblationReport, AblationRow, DistillOutcome, RunInfo, TeacherOutcome,
    CODE_VERSION, FEATURES_DIR, REPORT_FILE, RESOLVED_CONFIG_FILE, RUN_INFO_FILE,
    STUDENT_CHECKPOINT, TEACHER_CHECKPOINT,
};
pub use config::{
    DataConfig, DataSource, Overrides, RunConfig, RunSection, StudentConfig, StudentInit,
    TeacherConfig, DATA_ROOT_ENV, DEFAULT_PRESET,
};
pub use presets::{preset, PRESETS};
pub use registry::{TeacherRegistry, TeacherRegistryEntry};
