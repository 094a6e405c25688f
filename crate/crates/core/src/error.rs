use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("gradient check refused: fragment updates batch-norm running statistics")]
    StatefulFragment,

    #[error("no valid observation in series ({0})")]
    NoValidObservation(String),

    #[error("class {class} has {objects} object(s); at least 2 are required")]
    TooFewObjects { class: usize, objects: usize },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("class count mismatch: checkpoint has {model}, dataset has {data}")]
    ClassMismatch { model: usize, data: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        msg: msg.into(),
    })
}
