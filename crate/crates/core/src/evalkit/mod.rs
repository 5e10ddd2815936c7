//! Evaluation protocol: speaker-disjoint splits, easy and hard trial lists,
//! cosine scoring, equal error rate and the genre-by-genre EER matrix.

pub mod eer;
pub mod io;
pub mod matrix;
pub mod split;
pub mod trials;

use thiserror::Error;

pub use eer::{compute_eer, EerResult};
pub use matrix::{genre_eer_matrix, GenreMatrix, MatrixParams};
pub use split::{split_speakers, Split, SplitSpec};
pub use trials::{
    generate_easy_trials, generate_hard_trials, score_trials, HardTrialParams, Label, ScoredTrial, TrialPair, TrialTag,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("requested {requested} test speakers but only {available} speakers exist")]
    NotEnoughSpeakers { requested: usize, available: usize },
    #[error("utterance {0:?} has no speaker_id")]
    MissingSpeaker(String),
    #[error("utterance {0:?} has no genre")]
    MissingGenre(String),
    #[error("no embedding for utterance {0:?}")]
    MissingEmbedding(String),
    #[error("insufficient utterances: {0}")]
    InsufficientUtterances(String),
    #[error("no speaker in the pool has utterances of two different genres")]
    NoCrossGenreSpeakers,
    #[error("no score for trial {enrol} {test}")]
    MissingScore { enrol: String, test: String },
    #[error("scores need at least one target and one nontarget")]
    DegenerateLabels,
    #[error("insufficient genre coverage: {0}")]
    InsufficientGenreCoverage(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
