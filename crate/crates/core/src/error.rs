use thiserror::Error;

/// Errors produced anywhere in the modeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate marginal: {0}")]
    DegenerateMarginal(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("link function is not monotone: {0}")]
    LinkMonotonicity(String),

    #[error("non-stationary VAR: spectral radius {0:.6} >= 1")]
    Stability(f64),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("identifiability error: {0}")]
    Identifiability(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("near-singular block Toeplitz system (condition number {cond:.3e})")]
    NearSingularToeplitz { cond: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate bin: {0}")]
    DegenerateBin(String),

    #[error("particle weights degenerated ({0}); try a larger particle count")]
    WeightDegeneracy(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("fold {fold} is degenerate: {reason}")]
    FoldDegenerate { fold: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Strips stage tags down to the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the data rather than of the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Parse { .. }
                | Error::Format(_)
                | Error::EmptyInput(_)
                | Error::Shape(_)
                | Error::DegenerateMarginal(_)
                | Error::DegenerateSeries(_)
                | Error::FoldDegenerate { .. }
                | Error::Domain(_)
                | Error::InvalidParameter(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
