use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("missing value in column `{column}` at data row {row}")]
    MissingValue { row: usize, column: String },
    #[error("non-numeric value `{value}` in column `{column}` at data row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("dataset has no rows")]
    EmptyData,
    #[error("invalid fold plan: {0}")]
    InvalidFolds(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("solver did not converge after {sweeps} sweeps (last max change {max_change:e})")]
    NotConverged { sweeps: usize, max_change: f64 },
    #[error("treatment is not binary: {0}")]
    NonBinaryTreatment(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("{what} estimate is not positive ({value}); {hint}")]
    NonPositive {
        what: &'static str,
        value: f64,
        hint: String,
    },
    #[error("expression error: {0}")]
    Expression(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(
        "dictionary with {terms} terms needs {bytes} bytes for the Gram matrix (budget {budget}); \
         disable squares/interactions or lower max_terms"
    )]
    DictionaryTooLarge {
        terms: usize,
        bytes: usize,
        budget: usize,
    },
}

impl Error {
    /// Short machine-readable tag used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::MissingColumn(_) => "missing_column",
            Error::MissingValue { .. } => "missing_value",
            Error::NonNumeric { .. } => "non_numeric",
            Error::EmptyData => "empty_data",
            Error::InvalidFolds(_) => "invalid_folds",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFinite(_) => "non_finite",
            Error::NotConverged { .. } => "not_converged",
            Error::NonBinaryTreatment(_) => "non_binary_treatment",
            Error::Degenerate(_) => "degenerate",
            Error::NonPositive { .. } => "non_positive",
            Error::Expression(_) => "expression",
            Error::Unsupported(_) => "unsupported",
            Error::DictionaryTooLarge { .. } => "dictionary_too_large",
        }
    }
}
