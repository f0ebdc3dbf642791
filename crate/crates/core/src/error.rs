use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("degenerate label: {plane} plane of shot {shot} sums to zero")]
    DegenerateLabel { shot: usize, plane: &'static str },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("singular system: det(C^T C + ridge I) = {det:e}")]
    SingularSystem { det: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("ingestion failed for {}: {reason}", file.display())]
    Ingestion { file: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter {tensor}")]
    NonFinite { tensor: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("episode {episode} (seed {seed}): {source}")]
    Episode {
        episode: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Seed of the episode that failed, if known.
    pub fn episode_seed(&self) -> Option<u64> {
        match self {
            Error::Episode { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}
