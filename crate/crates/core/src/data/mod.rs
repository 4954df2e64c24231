//! Images, tensors, manifests, and the synthetic nose-print generator.

mod image;
mod manifest;
mod synth;
mod tensor;

use std::path::Path;

use thiserror::Error;

pub use image::{luma, read_image, write_pgm, Image};
pub use manifest::{parse_pair_manifest, parse_train_manifest, Pair, PairManifest, TrainManifest};
pub(crate) use manifest::{column_indices, csv_rows, field};
pub use synth::{
    generate_identities, generate_synthetic, identity_texture, make_verification_pairs, Jitter, SynthConfig,
    SyntheticSet,
};
pub use tensor::{read_tensor, write_tensor, TensorRecord, TENSOR_MAGIC};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: identity id {value:?} is not a non-negative integer")]
    NonIntegerId { line: usize, value: String },
    #[error("duplicate image path {0:?}")]
    DuplicatePath(String),
    #[error("line {line}: label {value:?} is not 0 or 1")]
    BadLabel { line: usize, value: String },
    #[error("line {line}: pair compares {path:?} with itself")]
    SelfPair { line: usize, path: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
