use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Random topology generation could not satisfy its geometric constraints.
    #[error("topology generation failed: {0}")]
    Generation(String),

    /// A numerical routine did not reach its tolerance.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The request exceeds what the chosen algorithm is willing to do.
    #[error("capability error: {0}")]
    Capability(String),

    /// The convex subproblem or the SCA loop could not proceed.
    #[error("optimization error: {0}")]
    Optimization(String),

    /// Invalid experiment or optimizer configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
