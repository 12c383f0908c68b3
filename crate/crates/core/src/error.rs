use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor construction with an empty shape, a zero extent or a buffer
    /// whose length disagrees with the shape.
    InvalidTensor { name: String, reason: String },
    /// Two checkpoints (or a checkpoint and a task vector) disagree on names.
    KeysetMismatch { missing: Vec<String>, extra: Vec<String> },
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    NonFinite { name: String },
    InvalidDensity(f64),
    InvalidBounds { gamma: f64, epsilon: f64 },
    InvalidTopK(f64),
    MissingDensity { name: String, block: Option<usize> },
    InvalidScore { layer: usize, value: f64 },
    LayerSetMismatch { model_id: String, base_id: String },
    ConventionMismatch { model: String, base: String },
    CountMismatch { what: &'static str, expected: usize, found: usize },
    InvalidAlpha(f64),
    EmptyInput(&'static str),
    InvalidArch(String),
    MissingTensor(String),
    SequenceTooLong { len: usize, max: usize },
    SequenceTooShort { len: usize, min: usize },
    TokenOutOfRange { token: u32, vocab_size: usize },
    UnknownName { what: &'static str, name: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidTensor { name, reason } => write!(f, "invalid tensor `{name}`: {reason}"),
            Error::KeysetMismatch { missing, extra } => {
                write!(f, "tensor name sets differ: missing {missing:?}, extra {extra:?}")
            }
            Error::ShapeMismatch { name, expected, found } => {
                write!(f, "shape mismatch for `{name}`: expected {expected:?}, found {found:?}")
            }
            Error::NonFinite { name } => write!(f, "non-finite value produced in `{name}`"),
            Error::InvalidDensity(d) => write!(f, "density {d} is outside (0, 1]"),
            Error::InvalidBounds { gamma, epsilon } => {
                write!(f, "bounds [{gamma}, {epsilon}] violate 0 < gamma <= epsilon <= 1")
            }
            Error::InvalidTopK(k) => write!(f, "top-k percentage {k} is outside (0, 100]"),
            Error::MissingDensity { name, block: Some(block) } => {
                write!(f, "no density for block {block} (tensor `{name}`) and no default density")
            }
            Error::MissingDensity { name, block: None } => {
                write!(f, "tensor `{name}` is outside any block and the plan has no default density")
            }
            Error::InvalidScore { layer, value } => {
                write!(f, "layer {layer} has invalid score {value}; scores must be finite and >= 0")
            }
            Error::LayerSetMismatch { model_id, base_id } => {
                write!(f, "profiles `{model_id}` and `{base_id}` cover different layers")
            }
            Error::ConventionMismatch { model, base } => {
                write!(f, "norm conventions differ: `{model}` vs `{base}`")
            }
            Error::CountMismatch { what, expected, found } => {
                write!(f, "expected {expected} {what}, found {found}")
            }
            Error::InvalidAlpha(a) => write!(f, "scaling coefficient {a} is not finite"),
            Error::EmptyInput(what) => write!(f, "{what} is empty"),
            Error::InvalidArch(reason) => write!(f, "invalid architecture: {reason}"),
            Error::MissingTensor(name) => write!(f, "checkpoint has no tensor `{name}`"),
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds max_seq_len {max}")
            }
            Error::SequenceTooShort { len, min } => {
                write!(f, "sequence of length {len} is shorter than {min}")
            }
            Error::TokenOutOfRange { token, vocab_size } => {
                write!(f, "token id {token} is not below vocab size {vocab_size}")
            }
            Error::UnknownName { what, name } => write!(f, "unknown {what} `{name}`"),
        }
    }
}

impl core::error::Error for Error {}
