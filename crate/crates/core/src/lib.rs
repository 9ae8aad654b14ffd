//! Test-time adaptation of image captioning models.
//!
//! For a single image, candidate captions are sampled from a teacher copy
//! of the model, scored by mean per-sentence image-text cosine similarity,
//! and the best one becomes the cross-entropy target for a LoRA-adapted
//! student. The teacher tracks the student by exponential moving average and
//! the returned caption comes from the best-scoring student checkpoint.
//!
//! Model access goes through the traits in [`backends`]; a small
//! deterministic toy model ships for tests and demonstrations.

pub mod adaptation;
pub mod backends;
pub mod clip_score;
pub mod corruptions;
pub mod error;
pub mod evaluation;
pub mod lora;
pub mod meta;
pub mod pipeline;
pub mod rng;

pub use adaptation::{
    adapt_sample, ema_update, generate_candidates, select_checkpoint, student_step, AdaptationTrace,
    CheckpointStrategy, IterationRecord, LrSchedule, OptimizerKind, TeacherMode, TttConfig,
};
pub use backends::toy::{ToyBackends, ToyWorld};
pub use backends::{Backends, DecodingMode, DecodingParams, EncoderBackend, GeneratorBackend, ImageInput};
pub use clip_score::{clip_score, rank_candidates, sentence_tokenize, CandidateSet, ScoredCaption, ScoringMode};
pub use corruptions::{corrupt, corrupt_dataset, CorruptionKind, CorruptionSpec};
pub use error::{Error, Result};
pub use evaluation::{chair_metrics, extract_objects, f1_metric, Annotations, HallucinationReport};
pub use lora::{AdapterCheckpoint, AdapterState, LoraConfig, Placement};
pub use meta::{inner_loop, meta_train, meta_update, MetaConfig};
pub use pipeline::{run_adapt, run_evaluate, run_meta, RunConfig, RunManifest};
