use salu_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaluError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    InvalidToken(usize),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("episode {id}: {reason}")]
    WrongEpisodeKind { id: u64, reason: &'static str },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("policy collapse guard: mean KL {kl:.4} > {limit} at iteration {iter}")]
    PolicyCollapse { iter: usize, kl: f64, limit: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SaluError>;

impl SaluError {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Autodiff(_) => "autodiff",
            Self::Io(_) => "io",
            Self::SequenceTooLong { .. } => "sequence_too_long",
            Self::InvalidToken(_) => "invalid_token",
            Self::UnknownToken(_) => "unknown_token",
            Self::InvalidSequence(_) => "invalid_sequence",
            Self::Config(_) => "config",
            Self::WrongEpisodeKind { .. } => "wrong_episode_kind",
            Self::Parse { .. } => "parse",
            Self::Checkpoint(_) => "checkpoint",
            Self::Divergence { .. } => "divergence",
            Self::PolicyCollapse { .. } => "policy_collapse",
            Self::Invalid(_) => "invalid",
        }
    }
}
