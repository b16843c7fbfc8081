//! Dataset loading, stream derivation, splitting, and batch assembly.

use std::path::Path;
use std::sync::Arc;

use super::{TrainConfig, TrainError};
use crate::ad::Tensor;
use crate::data::{
    build_ntu_graph, derive_stream, generate_with, read_cache, SkeletonGraph,
    SkeletonSequence, Stream, SynthSpec,
};
use crate::util::{is_train_index, rng_for};
use crate::Real;

/// A labelled dataset with its deterministic train/eval split.
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub graph: Arc<SkeletonGraph>,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.sequences[0].frames()
    }

    pub fn channels(&self) -> usize {
        self.sequences[0].channels()
    }
}

/// Load the configured dataset (synthetic or cached) and derive the
/// configured input stream.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset, TrainError> {
    let raw = if cfg.exp.data.dataset == "synthetic" {
        let graph = Arc::new(build_ntu_graph());
        let s = &cfg.exp.data.synth;
        generate_with(
            &graph,
            &SynthSpec {
                classes: s.classes,
                per_class: s.per_class,
                frames: s.frames,
                seed: cfg.exp.seed,
                jitter: s.jitter,
            },
        )?
    } else {
        let path = Path::new(&cfg.exp.data.dataset);
        let graph = Arc::new(build_ntu_graph());
        read_cache(path, &graph)?
    };
    from_sequences(raw, cfg.exp.data.stream)
}

/// Wrap already-loaded sequences (deriving `stream`) into a dataset.
pub fn from_sequences(
    raw: Vec<SkeletonSequence>,
    stream: Stream,
) -> Result<Dataset, TrainError> {
    if raw.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    let graph = raw[0].graph.clone();
    let mut sequences = Vec::with_capacity(raw.len());
    let mut labels = Vec::with_capacity(raw.len());
    for s in &raw {
        let label = s.label.ok_or_else(|| {
            TrainError::LabelSpaceMismatch("dataset contains unlabelled sequences".into())
        })?;
        labels.push(label);
        sequences.push(derive_stream(s, stream)?);
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let train_indices: Vec<usize> = (0..sequences.len()).filter(|&i| is_train_index(i)).collect();
    let eval_indices: Vec<usize> = (0..sequences.len()).filter(|&i| !is_train_index(i)).collect();
    if train_indices.is_empty() || eval_indices.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    Ok(Dataset {
        sequences,
        labels,
        num_classes,
        graph,
        train_indices,
        eval_indices,
    })
}

/// Deterministic per-epoch batch order: shuffle `indices` with a seed mixed
/// from (seed, stage tag, epoch), then chunk; trailing batches smaller than
/// 2 are dropped.
pub fn epoch_batches(
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    stage_tag: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = indices.to_vec();
    let mut rng = rng_for(&[seed, stage_tag, epoch as u64]);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Stack sequences into an untracked `N x C x T x V` input tensor.
pub fn stack_batch(seqs: &[&SkeletonSequence]) -> Tensor {
    let (c, t, v) = seqs[0].data.dim();
    let mut values = Vec::with_capacity(seqs.len() * c * t * v);
    for s in seqs {
        debug_assert_eq!(s.data.dim(), (c, t, v));
        values.extend(s.data.iter().copied());
    }
    Tensor::from_vec(values, vec![seqs.len(), c, t, v])
}

/// Stack flat per-sample feature rows into an `N x ...` tensor.
pub fn stack_rows(rows: &[&[Real]], row_shape: &[usize]) -> Tensor {
    let len: usize = row_shape.iter().product();
    let mut values = Vec::with_capacity(rows.len() * len);
    for r in rows {
        debug_assert_eq!(r.len(), len);
        values.extend_from_slice(r);
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(row_shape);
    Tensor::from_vec(values, shape)
}
