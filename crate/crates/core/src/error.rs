use thiserror::Error;

#[derive(Debug, Error)]
pub enum MistError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} is empty or out of range for shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("selection: {0}")]
    Selection(String),

    #[error("positions already added to these video features")]
    PositionsAlreadyAdded,

    #[error("feature file: {0}")]
    Format(String),

    #[error("loss is not deterministic under frozen noise: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MistError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> MistError {
    MistError::Shape {
        op,
        detail: detail.into(),
    }
}
