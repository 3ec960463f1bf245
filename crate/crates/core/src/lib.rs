pub mod adversarial;
pub mod aligner;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod modalities;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quantize;
pub mod seqmodel;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::{GenTrainConfig, ModelConfig, SkeletonPreset, VqConfig, VqTrainConfig};
pub use data::{Corpus, CorpusConfig, GestureClip, Skeleton, Split};
pub use error::{Error, Result};
pub use metrics::{EvalConfig, ExtractorConfig, FeatureExtractor, MetricReport};
pub use model::{ClipFeatures, Generator};
pub use numerics::{ParamStore, Tape, Tensor, Var};
pub use pipeline::{Ablation, Command, Outcome, RunConfig};
pub use quantize::VqVae2;
pub use train::{GenTrainer, TrainState};
