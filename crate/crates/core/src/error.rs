use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a configuration) disagree on shape.
    Shape { op: &'static str, detail: String },
    /// A NaN or infinity was found at flat index `index`.
    NonFinite { op: &'static str, index: usize },
    /// An argument is outside its documented domain.
    InvalidArgument { op: &'static str, detail: String },
    /// An empty collection was passed where at least one element is required.
    Empty(&'static str),
    /// The inverse FFT produced an imaginary part above tolerance.
    NonHermitian { residual: f64, bound: f64 },
    /// A reference mask selects no pixels.
    NoSubject,
    /// No prompt encoder is registered under this identifier.
    UnknownProvider(String),
    /// A loss function returned different values for identical parameters.
    NonDeterministic { first: f64, second: f64 },
    /// Subject placement kept overlapping after the retry budget.
    Placement { scene: u64, retries: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op, index } => {
                write!(f, "{op}: non-finite value at flat index {index}")
            }
            Error::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
            Error::Empty(what) => write!(f, "{what}: empty input"),
            Error::NonHermitian { residual, bound } => write!(
                f,
                "ifft2: imaginary residual {residual:e} exceeds {bound:e}; spectrum is not Hermitian"
            ),
            Error::NoSubject => write!(f, "no subject: reference mask is empty"),
            Error::UnknownProvider(id) => write!(f, "unknown prompt provider `{id}`"),
            Error::NonDeterministic { first, second } => write!(
                f,
                "loss function is not deterministic: {first:e} then {second:e}"
            ),
            Error::Placement { scene, retries } => write!(
                f,
                "scene {scene}: could not place subjects without overlap after {retries} retries"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn invalid(op: &'static str, detail: String) -> Error {
    Error::InvalidArgument { op, detail }
}
