use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("graph values were freed by a previous backward pass")]
    GraphFreed,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("imaginary residue {residue:e} exceeds tolerance {tol:e}; spectrum is not conjugate-symmetric")]
    SymmetryViolation { residue: f64, tol: f64 },
    #[error("filter size {size} outside [0, {max}]")]
    FilterSize { size: f64, max: usize },
    #[error("extent mismatch: expected {expected:?}, got {got:?}")]
    Extent {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("frequency bin ({i}, {j}) outside a {h}x{w} grid")]
    BinOutOfRange { i: usize, j: usize, h: usize, w: usize },
    #[error("energy ratio undefined for an all-zero image")]
    UndefinedRatio,
    #[error("matrix is not row-stochastic: {0}")]
    NotRowStochastic(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input has shape {got:?}, expected {expected}")]
    Input { expected: String, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: size {size} bytes is not a positive multiple of the {record}-byte record")]
    FileSize { path: String, size: usize, record: usize },
    #[error("record {record}: label {label} outside [0, {classes})")]
    Label {
        record: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid augmentation argument: {0}")]
    Augment(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value at {context}: {source}")]
    NonFinite { context: String, source: TensorError },
    #[error("label mismatch: {0}")]
    Labels(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("model predicts {model} classes, dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("invalid evaluation argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}
