use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Verification,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A softmax row had every entry masked out.
    DegenerateMask {
        row: usize,
    },
    InvalidParameter(String),
    /// `backward` was called on a graph that was already consumed.
    StaleGraph,
    NonScalarLoss {
        rows: usize,
        cols: usize,
    },
    NonFinite(String),
    EmptyLog,
    Precondition(String),
    /// Every item is owned by the user, so no negative exists.
    Saturated,
    UnknownItem {
        id: u32,
        vocabulary: usize,
    },
    /// A loss was requested over zero valid positions.
    DegenerateBatch,
    Divergence {
        epoch: usize,
        loss: f64,
    },
    EmptyInput(&'static str),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) => ErrorKind::Config,
            Error::EmptyLog
            | Error::Precondition(_)
            | Error::Saturated
            | Error::UnknownItem { .. }
            | Error::EmptyInput(_) => ErrorKind::Data,
            Error::Shape { .. }
            | Error::DegenerateMask { .. }
            | Error::StaleGraph
            | Error::NonScalarLoss { .. }
            | Error::NonFinite(_)
            | Error::DegenerateBatch
            | Error::Divergence { .. } => ErrorKind::Numeric,
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "dimension mismatch in {op}: {}x{} vs {}x{}", left.0, left.1, right.0, right.1)
            }
            Error::DegenerateMask { row } => write!(f, "softmax row {row} is fully masked"),
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::StaleGraph => f.write_str("backward called twice on the same graph; run forward again"),
            Error::NonScalarLoss { rows, cols } => {
                write!(f, "backward needs a 1x1 loss, got {rows}x{cols}")
            }
            Error::NonFinite(ctx) => write!(f, "non-finite value in {ctx}"),
            Error::EmptyLog => f.write_str("interaction log is empty"),
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::Saturated => f.write_str("no negative item available: user owns the whole catalogue"),
            Error::UnknownItem { id, vocabulary } => {
                write!(f, "item id {id} outside vocabulary of {vocabulary} ids")
            }
            Error::DegenerateBatch => f.write_str("loss requested over zero valid positions"),
            Error::Divergence { epoch, loss } => {
                write!(f, "training diverged in epoch {epoch} (loss = {loss})")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
        }
    }
}

impl core::error::Error for Error {}
