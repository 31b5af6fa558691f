//! Encoders, projection heads, parameter storage and checkpoints.

mod bundle;
pub mod checkpoint;
mod encoder;
mod head;
mod params;

pub use bundle::{
    BundleVars, CheckpointHeader, EncoderOutput, ModelBundle, Role, CHECKPOINT_MAGIC,
    ENCODER_PREFIX, HEAD_PREFIX,
};
pub use encoder::{
    encoder_param_count, forward_encoder, init_encoder, EncoderConfig, EncoderFamily, EncoderVars,
    ForwardOptions, MaskMode,
};
pub use head::{
    build_student_head, check_temperature, head_forward, head_scores, HeadConfig, HeadVariant,
};
pub use params::{Init, ParamEntry, ParamStore};
