use alloc::string::String;
use core::fmt;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on a dimension.
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// A value that must be finite was NaN or infinite.
    NonFinite { what: &'static str },
    /// Cosine similarity or normalization of a zero vector.
    ZeroNorm,
    /// One-sided Jacobi did not converge within its sweep budget.
    SvdNoConvergence { sweeps: usize },
    /// An index (token, layer, neuron, position) was out of range.
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Model configuration violates an invariant; names the field.
    InvalidConfig { field: &'static str, reason: String },
    /// Prompt violates an invariant.
    InvalidPrompt(String),
    /// Character in the text has no vocabulary entry.
    UnknownCharacter { ch: char, offset: usize },
    /// Duplicate entry while building a vocabulary.
    DuplicateToken(String),
    /// Learning-rate sign convention violated.
    EtaConvention { eta: f64 },
    /// Final layer norm requested on a model built without one.
    NoFinalLayerNorm,
    /// Corpus lacks segment labels required by the analysis.
    UnlabeledCorpus { entry: usize },
    /// Corpus contained no entries.
    EmptyCorpus,
    /// Loss went non-finite while probing a parameter entry.
    NonFiniteProbe {
        param: String,
        row: usize,
        col: usize,
    },
    /// Finite-difference step must be positive.
    InvalidStep,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                what,
                expected,
                found,
            } => write!(
                f,
                "shape mismatch for {what}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::ZeroNorm => f.write_str("vector has zero norm"),
            Error::SvdNoConvergence { sweeps } => {
                write!(f, "SVD did not converge after {sweeps} Jacobi sweeps")
            }
            Error::OutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::InvalidConfig { field, reason } => {
                write!(f, "invalid config field `{field}`: {reason}")
            }
            Error::InvalidPrompt(msg) => write!(f, "invalid prompt: {msg}"),
            Error::UnknownCharacter { ch, offset } => {
                write!(f, "character {ch:?} at byte {offset} has no vocabulary entry")
            }
            Error::DuplicateToken(tok) => write!(f, "duplicate vocabulary entry {tok:?}"),
            Error::EtaConvention { eta } => write!(
                f,
                "learning rate {eta} violates the negative-rate convention (pass an override to allow it)"
            ),
            Error::NoFinalLayerNorm => f.write_str("model has no final layer norm"),
            Error::UnlabeledCorpus { entry } => {
                write!(f, "corpus entry {entry} has no segment labels")
            }
            Error::EmptyCorpus => f.write_str("corpus is empty"),
            Error::NonFiniteProbe { param, row, col } => {
                write!(f, "non-finite loss while probing {param}[{row}, {col}]")
            }
            Error::InvalidStep => f.write_str("finite-difference step must be positive"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
