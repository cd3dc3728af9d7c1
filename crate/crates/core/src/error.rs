use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("depth_to_space: {channels} channels not divisible by block {block}²")]
    IndivisibleChannels { channels: usize, block: usize },
    #[error("space_to_depth: spatial extent {extent} not divisible by block {block}")]
    IndivisibleSpatial { extent: usize, block: usize },
    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by backward; build it with retain_graph to reuse")]
    GraphConsumed,
    #[error("value out of range for {op}: {value}")]
    OutOfRange { op: &'static str, value: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("tile grid mismatch: {left:?} vs {right:?}")]
    GridMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("forced mask requires e_min <= e_max, got {e_min} > {e_max}")]
    InvertedExtrema { e_min: f64, e_max: f64 },
    #[error("iteration {k} outside 1..={max}")]
    Iteration { k: usize, max: usize },
}

#[derive(Debug, Error)]
pub enum BitstreamError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("stream too short for header ({0} bytes)")]
    ShortHeader(usize),
    #[error("truncated payload at iteration {iteration}: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        iteration: usize,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} bytes of trailing garbage after last payload")]
    TrailingBytes(usize),
    #[error("inconsistent codes at iteration {iteration}, tile ({row}, {col}): {reason}")]
    Inconsistent {
        iteration: usize,
        row: usize,
        col: usize,
        reason: &'static str,
    },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("corrupt compressed container: {0}")]
    Container(io::Error),
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed PPM header: {0}")]
    Header(String),
    #[error("unsupported PPM format: {0}")]
    Unsupported(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported image extension for {0}")]
    Extension(PathBuf),
    #[cfg(feature = "png")]
    #[error("png: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[cfg(feature = "png")]
    #[error("png: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("config hash mismatch: checkpoint {found:016x}, expected {expected:016x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: shape {found:?} does not match architecture {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at iteration {iteration}, {pass} pass, in {layer}")]
    NonFinite {
        iteration: usize,
        pass: &'static str,
        layer: String,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dataset(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
