//! Orchestration behind the command-line tool: configuration, synthetic
//! corpora, preprocessing, training, evaluation, checkpoints and the
//! gradient audit.

mod checkpoint;
mod config;
mod gradcheck;
mod model;
mod preprocess;
mod synth;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::RunConfig;
pub use gradcheck::{gradcheck, GradcheckOptions, GroupReport, GRADCHECK_CLIP_LEN, GRADCHECK_TOLERANCE};
pub use model::{forward, ModelParams};
pub use preprocess::{preprocess_corpus, PreprocessRow};
pub use synth::{motion_score, synth_corpus, SynthSpec, SynthSample};
pub use train::{
    evaluate, is_validation, load_corpus, predict, train, EvalRecord, EpochMetrics, Sample,
    TrainOutcome, METRICS_HEADER,
};
