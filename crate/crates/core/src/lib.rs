//! Hierarchical offline reinforcement learning at desk scale.

pub mod analysis;
pub mod conductor;
pub mod data;
pub mod diffusion;
pub mod env;
pub mod experiment;
pub mod nn;
pub mod orchestrator;
pub mod performer;

use std::path::PathBuf;

/// Crate-wide error, wrapping each module's error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {path}: {reason}")]
    Missing { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error(transparent)]
    Conductor(#[from] conductor::ConductorError),
    #[error(transparent)]
    Performer(#[from] performer::PerformerError),
    #[error(transparent)]
    Orchestrator(#[from] orchestrator::OrchestratorError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when training or sampling produced non-finite numbers.
    pub fn is_divergence(&self) -> bool {
        use conductor::ConductorError as C;
        use diffusion::DiffusionError as D;
        use orchestrator::OrchestratorError as O;
        use performer::PerformerError as P;
        fn nn(e: &nn::NnError) -> bool {
            matches!(e, nn::NnError::NonFiniteGradient)
        }
        fn diff(e: &D) -> bool {
            match e {
                D::NonFiniteLoss => true,
                D::Nn(e) => nn(e),
                _ => false,
            }
        }
        fn perf(e: &P) -> bool {
            match e {
                P::Divergence { .. } => true,
                P::Diffusion(e) => diff(e),
                P::Nn(e) => nn(e),
                _ => false,
            }
        }
        fn cond(e: &C) -> bool {
            match e {
                C::Divergence { .. } => true,
                C::Diffusion(e) => diff(e),
                C::Nn(e) => nn(e),
                C::Performer(e) => perf(e),
                _ => false,
            }
        }
        match self {
            Error::Nn(e) => nn(e),
            Error::Diffusion(e) => diff(e),
            Error::Performer(e) => perf(e),
            Error::Conductor(e) => cond(e),
            Error::Orchestrator(O::Conductor(e)) => cond(e),
            Error::Orchestrator(O::Performer(e)) => perf(e),
            _ => false,
        }
    }

    /// True when an input file or checkpoint is absent or of the wrong kind.
    pub fn is_missing_artifact(&self) -> bool {
        use orchestrator::OrchestratorError as O;
        let not_found = |e: &std::io::Error| e.kind() == std::io::ErrorKind::NotFound;
        match self {
            Error::Missing { .. } => true,
            Error::Io { source, .. } => not_found(source),
            Error::Data(data::DataError::Io(e)) | Error::Nn(nn::NnError::Io(e)) => not_found(e),
            Error::Orchestrator(O::MissingCheckpoint(_) | O::KindMismatch { .. }) => true,
            _ => false,
        }
    }
}
