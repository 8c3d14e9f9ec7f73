//! Masked-token corruption, the interleaved schedule, the two training
//! phases and evaluation metrics.

pub mod engine;
pub mod interleave;
pub mod kr_cache;
pub mod masking;
pub mod metrics;
pub mod schedule;

pub use interleave::{Corpus, RunReport, TrainConfig, TvmKaTrainer};
pub use masking::{mlm_mask, EncodedValueSequence, MlmBatch};
pub use metrics::{evaluate, MetricsReport};
pub use schedule::{InterleaveSchedule, Phase, PhaseKind};
