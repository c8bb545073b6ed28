use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Pool and configuration cannot satisfy their joint invariants.
    #[error("infeasible configuration: {0}")]
    ConfigInfeasible(String),

    /// An argument is outside the domain of a statistical kernel.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("challenge {0} has already been graded")]
    DuplicateGrade(u64),

    #[error("challenge {0} was not issued by this server")]
    UnknownChallenge(u64),

    #[error("answer does not cover exactly the images of challenge {0}")]
    AnswerDomainMismatch(u64),

    /// Both likelihoods underflowed; callers treat this as "no update".
    #[error("posterior is indeterminate: both likelihoods are zero")]
    IndeterminatePosterior,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Invalid or unknown key in a configuration document.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
