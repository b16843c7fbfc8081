//! Skeleton sequence data: graph topology, NTU `.skeleton` parsing,
//! synthetic generation, derived input streams, augmentations, and the
//! binary dataset cache.

mod augment;
mod cache;
mod graph;
mod ntu;
mod stream;
mod synth;

pub use augment::{augment, crop_resize, rotate_sequence, AugmentationSpec};
pub use cache::{read_cache, write_cache};
pub use graph::{build_ntu_graph, SkeletonGraph, NTU_NUM_JOINTS};
pub use ntu::{parse_ntu_skeleton, write_ntu_skeleton};
pub use stream::{derive_stream, Stream};
pub use synth::{generate_synthetic, generate_with, SynthSpec};

use ndarray::Array3;
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty file")]
    EmptyFile,
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("non-numeric field at line {line}: {field:?}")]
    NonNumericField { line: usize, field: String },
    #[error("bone stream requested but the graph has no parent map")]
    MissingParents,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("bad cache file: {0}")]
    BadCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One person's joint coordinates over time, shape `C × T × V`, plus the
/// graph the joints live on and an optional class label.
#[derive(Debug, Clone)]
pub struct SkeletonSequence {
    /// Coordinates, shape `(channels, frames, joints)`.
    pub data: Array3<Real>,
    pub graph: std::sync::Arc<SkeletonGraph>,
    pub label: Option<usize>,
}

impl SkeletonSequence {
    pub fn new(
        data: Array3<Real>,
        graph: std::sync::Arc<SkeletonGraph>,
        label: Option<usize>,
    ) -> Result<Self, DataError> {
        let (c, t, v) = data.dim();
        if c < 1 || t < 2 {
            return Err(DataError::InvalidSequence(format!(
                "need C >= 1 and T >= 2, got C={c}, T={t}"
            )));
        }
        if v != graph.num_joints {
            return Err(DataError::InvalidSequence(format!(
                "V={v} does not match the graph's {} joints",
                graph.num_joints
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(DataError::InvalidSequence(
                "non-finite coordinate".into(),
            ));
        }
        Ok(Self { data, graph, label })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn joints(&self) -> usize {
        self.data.dim().2
    }
}
