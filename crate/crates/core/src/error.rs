//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("column `{column}` contains label `{label}` which is not declared in the schema")]
    UnknownLabel { column: String, label: String },

    #[error("missing value in column `{column}` at data row {row}")]
    MissingValue { column: String, row: usize },

    #[error("invalid query: {0}")]
    Query(String),

    #[error("canonicalisation would require tying parameters: {0}")]
    TyingRequired(String),

    #[error("invalid privacy parameters: {0}")]
    Privacy(String),

    #[error("could not bracket noise scale: delta({lo:e}) = {delta_lo:e}, delta({hi:e}) = {delta_hi:e}, target {target:e}")]
    Bracket {
        lo: f64,
        hi: f64,
        delta_lo: f64,
        delta_hi: f64,
        target: f64,
    },

    #[error("domain has {cells} cells, more than the enumeration cap of {cap}")]
    DomainTooLarge { cells: String, cap: u64 },

    #[error("induced width {width} exceeds the configured limit {limit}")]
    TreeWidth { width: usize, limit: usize },

    #[error("matrix not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("release does not match the query collection (fingerprint {found}, expected {expected})")]
    FingerprintMismatch { expected: String, found: String },

    #[error("all estimates dropped for coefficient `{0}`")]
    AllDropped(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::Bracket { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::Numeric(_)
                | Error::TreeWidth { .. }
                | Error::AllDropped(_)
        )
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
