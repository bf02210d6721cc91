//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor or graph operation; names the operand.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward called before any forward operation was recorded")]
    EmptyGraph,

    #[error("parameter name already registered: {0}")]
    DuplicateParam(String),

    #[error("invalid label index {label} for alphabet of size {size}")]
    InvalidLabel { label: usize, size: usize },

    #[error("transcript does not end with the end-of-sequence label")]
    MissingEos,

    #[error("empty input sequence")]
    EmptySequence,

    #[error("input of {frames} frames is shorter than the total pooling factor {factor}")]
    SequenceTooShort { frames: usize, factor: usize },

    #[error("attention window is empty after clipping")]
    EmptyWindow,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty reference: error rate is undefined")]
    EmptyReference,

    #[error("ARPA parse error at line {line}: {msg}")]
    ArpaParse { line: usize, msg: String },

    #[error("ARPA section \\{order}-grams: declares {declared} entries but {found} were listed")]
    ArpaCount {
        order: usize,
        declared: usize,
        found: usize,
    },

    #[error("{order}-gram \"{gram}\" references context \"{context}\" that is not a {prev}-gram")]
    ArpaContext {
        order: usize,
        gram: String,
        context: String,
        prev: usize,
    },

    #[error("word \"{0}\" is not covered by the language model (closed vocabulary)")]
    OovWord(String),

    #[error("word \"{word}\" contains character '{ch}' outside the alphabet")]
    BadSpelling { word: String, ch: char },

    #[error("composition alphabet mismatch: output label {label} has no input transition in the right operand")]
    AlphabetMismatch { label: u32 },

    #[error("operation requires a deterministic FST")]
    NotDeterministic,

    #[error("operation requires an acceptor (input label = output label); project first")]
    NotAcceptor,

    #[error("nondeterminizable at budget: subset construction exceeded {budget} states")]
    StateBudget { budget: usize },

    #[error("shortest-distance iteration did not converge (total path weight diverges)")]
    PushDiverged,

    #[error("FST text format error at line {line}: {msg}")]
    FstFormat { line: usize, msg: String },

    #[error("beam emptied: every candidate was pruned")]
    EmptyBeam,

    #[error("{0}")]
    Io(#[from] std::io::Error),
}
