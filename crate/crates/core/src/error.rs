use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("force field inconsistency at q = {point:?}: {detail}")]
    Consistency { point: Vec<f64>, detail: String },

    #[error("force field has no declared decomposition F = grad U + ell")]
    DecompositionMissing,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A matrix required to be Hurwitz (all eigenvalues in the open left half plane) is not.
    #[error("matrix is not stable (spectral abscissa {abscissa:.3e}): {context}")]
    Unstable { abscissa: f64, context: String },

    /// Refusal to run a pipeline on a model that failed stability classification.
    #[error("model rejected by stability classification (verdict {:?})", .0.verdict)]
    UnstableModel(Box<crate::stability::StabilityVerdict>),

    #[error("integration diverged at t = {t}: last state {state:?}")]
    Divergence { t: f64, state: Vec<f64> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("outside domain: {0}")]
    Domain(String),

    #[error("method not applicable: {0}")]
    Method(String),

    #[error("singular covariance: {0}")]
    Singular(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
