use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("node id {id} out of range for {num_nodes} nodes")]
    NodeOutOfRange { id: usize, num_nodes: usize },

    #[error("label {label} out of range for {num_classes} classes (node {node})")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("mask is empty")]
    EmptyMask,

    #[error("empty node set: {0}")]
    EmptyNodeSet(&'static str),

    #[error("loss node is not a scalar: shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite loss {loss} at epoch {epoch} ({context})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        context: String,
    },

    #[error("graph inconsistency: {0}")]
    GraphMismatch(String),

    #[error("bundle file missing: {path}")]
    BundleMissingFile { path: PathBuf },

    #[error("bundle shape mismatch in {path}: expected {expected}, found {actual}")]
    BundleShape {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("bundle format error in {path}: {reason}")]
    BundleFormat { path: PathBuf, reason: String },

    #[error("dataset {dataset} too small: need {needed} nodes, have {available}")]
    DatasetTooSmall {
        dataset: String,
        needed: usize,
        available: usize,
    },

    #[error("no predefined split sizes for dataset {0}; pass explicit sizes or provide mask files")]
    UnknownSplitSizes(String),

    #[error("record sets have mixed lengths: {0} vs {1}")]
    MixedRecordLengths(usize, usize),

    #[error("need at least {needed} records, found {found}")]
    NotEnoughRecords { needed: usize, found: usize },

    #[error("no records to analyze")]
    NoRecords,

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }
}
