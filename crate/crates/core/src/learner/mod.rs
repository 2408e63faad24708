//! Query encoder trained end to end through the memory loss.
//!
//! [`encoder`] maps a sequence position to a unit query, [`adam`] optimizes
//! its weights and [`train`] ties both to a [`MemoryStore`](crate::MemoryStore):
//! training steps, evaluation and frozen-weight context ingestion.

pub mod adam;
pub mod encoder;
pub mod train;

pub use adam::AdamState;
pub use encoder::{
    encode_backward, encode_query, EncoderCache, EncoderConfig, EncoderParams, GradAccumulator, PreparedEncoder,
};
pub use train::{
    evaluate, ingest_context, oneshot_context_eval, train_step, BackendKind, BatchSampler, EvalMetrics, Learner,
    OneShotReport, StepReport, TrainRunConfig,
};
