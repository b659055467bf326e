use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor data length {got} does not match shape {shape:?} ({expected} entries)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("backward root must be scalar-shaped, got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("node {id} does not exist on this tape ({len} nodes)")]
    InvalidNode { id: usize, len: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("latent has {z_channels} channels but embeddings have {embedding_dim}")]
    ChannelMismatch {
        z_channels: usize,
        embedding_dim: usize,
    },

    #[error("attention maps are already normalized")]
    AlreadyNormalized,

    #[error("operation requires normalized attention maps")]
    NotNormalized,

    #[error("loss weight {name} must be nonnegative, got {value}")]
    NegativeWeight { name: &'static str, value: String },

    #[error("unknown concept `{name}`")]
    UnknownConcept { name: String },

    #[error("layout file {path}:{line}: {msg}")]
    LayoutParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("pgm {path}: {msg}")]
    PgmFormat { path: String, msg: String },

    #[error("timestep {t} out of range [1, {steps}]")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("non-finite gradient at denoising step {step}")]
    NonFiniteGradient { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
