//! Synthetic corpora, skeleton kinematics and corpus files.

mod corpus;
mod io;
mod skeleton;

pub use corpus::{
    corpus_stats, filter_sot, generate_corpus, Corpus, CorpusConfig, CorpusStats, GestureClip,
    Split, FORMAT_VERSION, FRAME_RATE, SAMPLE_RATE, VOCAB,
};
pub use io::{
    corpus_checksum, corpus_from_str, corpus_to_string, format_version, load_corpus, save_corpus,
};
pub use skeleton::Skeleton;

/// Default SoT median-confidence threshold.
pub const SOT_TAU: f64 = 0.05;
