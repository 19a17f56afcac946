use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Input shapes do not conform to an operation's rule.
    Shape(String),
    /// Operation name not in the catalog.
    UnknownOp(String),
    /// NaN or infinity produced (or received) by the named operation.
    NonFinite(String),
    /// `backward` requires a single-element root.
    NonScalarRoot { numel: usize },
    /// The computation record was already consumed by `backward`.
    RecordConsumed,
    /// A tensor handle that does not belong to this record.
    UnknownNode(usize),
    /// Class, predicate or node index outside its range.
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },
    InvalidPermutation,
    /// Function evaluated twice at the same point gave different values.
    NonDeterministic,
    InvalidConfig(String),
    /// Rejection sampling could not produce a valid scene.
    RejectionBudget(String),
    OverlappingBuckets { first: (u64, u64), second: (u64, u64) },
    UnknownRule(String),
    /// Non-finite gradient for the named parameter; the step was not applied.
    NonFiniteGradient(String),
    EmptyInput(&'static str),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, position: usize, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::UnknownOp(m) => write!(f, "unknown op kind `{m}`"),
            Error::NonFinite(m) => write!(f, "non-finite value produced by {m}"),
            Error::NonScalarRoot { numel } => {
                write!(f, "backward root must be scalar, got {numel} elements")
            }
            Error::RecordConsumed => f.write_str("computation record already consumed"),
            Error::UnknownNode(id) => write!(f, "node {id} is not part of this record"),
            Error::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::InvalidPermutation => f.write_str("invalid permutation"),
            Error::NonDeterministic => f.write_str("function is not deterministic"),
            Error::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            Error::RejectionBudget(m) => write!(f, "rejection budget exhausted: {m}"),
            Error::OverlappingBuckets { first, second } => write!(
                f,
                "buckets {}-{} and {}-{} overlap",
                first.0, first.1, second.0, second.1
            ),
            Error::UnknownRule(m) => write!(f, "unknown rule kind `{m}`"),
            Error::NonFiniteGradient(m) => write!(f, "non-finite gradient for parameter {m}"),
            Error::EmptyInput(m) => write!(f, "empty input: {m}"),
            Error::Diverged { epoch, position, detail } => {
                write!(f, "training diverged at epoch {epoch}, record {position}: {detail}")
            }
        }
    }
}

impl core::error::Error for Error {}
