use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(&'static str),

    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),

    #[error("combination ({learning_type}, {strategy}) is meaningless")]
    MeaninglessCombination {
        learning_type: String,
        strategy: String,
    },

    #[error("unknown recipe `{0}`")]
    UnknownRecipe(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parts must lie in 1..={num_layers}, got {parts}")]
    BadParts { parts: usize, num_layers: usize },

    #[error("incompatible shapes: {0}")]
    IncompatibleShapes(String),

    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("index is empty")]
    EmptyIndex,

    #[error("ground-truth id `{0}` is not in the index")]
    UnknownGroundTruthId(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
