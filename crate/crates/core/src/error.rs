use std::fmt;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input lies outside the domain of an operation (empty measure, bad
    /// interval, non-positive step, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A model callback returned an object of the wrong shape.
    #[error("structural error in `{function}`: {detail}")]
    Structural { function: &'static str, detail: String },

    /// A simulated state, tangent or statistic became non-finite.
    #[error("non-finite value during propagation{}", Coordinates(*.particle, *.step))]
    Propagation {
        particle: Option<usize>,
        step: Option<usize>,
    },

    /// The operation only exists for a specific model family.
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("index {index} out of range (valid: 0..={max})")]
    IndexOutOfRange { index: usize, max: usize },

    /// Two inputs that must be aligned (grid vs tangents, measure vs
    /// velocities) disagree in shape.
    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("non-finite contrast at theta = ({theta1}, {theta2})")]
    NonFiniteContrast { theta1: f64, theta2: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

struct Coordinates(Option<usize>, Option<usize>);

impl fmt::Display for Coordinates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.0, self.1) {
            (Some(p), Some(s)) => write!(f, " at particle {p}, step {s}"),
            (Some(p), None) => write!(f, " at particle {p}"),
            (None, Some(s)) => write!(f, " at step {s}"),
            (None, None) => Ok(()),
        }
    }
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Propagation { .. } | Error::Singular(_) | Error::NonFiniteContrast { .. }
        )
    }
}
