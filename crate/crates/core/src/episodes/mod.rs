//! Data handling: the synthetic generator, on-disk datasets, class splits,
//! the unlabeled pool, N-way K-shot episodes, and accuracy statistics.

mod dataset;
mod eval;
mod synthetic;

pub use dataset::{sample_episode, sample_episode_from, split_classes, Dataset, Episode, Split, UnlabeledPool};
pub use eval::{
    aggregate, embed_samples, evaluate_episodes, fine_tune_and_score, score_episode, AccuracySummary, ClassifierInit,
    EmbeddingTable, EpisodeSpec, FineTuneConfig, Z95,
};
pub use synthetic::{generate_synthetic, SYNTHETIC_CHANNELS};
