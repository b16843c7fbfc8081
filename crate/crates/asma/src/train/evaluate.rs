//! Held-out evaluation of composite checkpoints and score-level fusion of
//! the joint/bone/motion streams.

use std::path::Path;

use super::dataset::{from_sequences, stack_batch, Dataset};
use super::probe::load_composite;
use super::{TrainConfig, TrainError};
use crate::data::Stream;
use crate::nn::align::accuracy;
use crate::nn::soften;
use crate::Real;

const CHUNK: usize = 32;

/// Held-out top-1 accuracy of a composite classifier checkpoint.
pub fn evaluate_checkpoint(
    cfg: &TrainConfig,
    ds: &Dataset,
    ckpt: &Path,
) -> Result<Real, TrainError> {
    let (probs, num_classes) = composite_eval_probs(cfg, ds, ckpt)?;
    let labels: Vec<usize> = ds.eval_indices.iter().map(|&i| ds.labels[i]).collect();
    let flat: Vec<Real> = probs.into_iter().flatten().collect();
    Ok(accuracy(&flat, num_classes, &labels))
}

/// Eval-split class probabilities of a composite checkpoint.
pub fn composite_eval_probs(
    cfg: &TrainConfig,
    ds: &Dataset,
    ckpt: &Path,
) -> Result<(Vec<Vec<Real>>, usize), TrainError> {
    let (mut enc_theta, mut enc_phi, align) = load_composite(cfg, ds, ckpt)?;
    let p_theta = enc_theta.store.constants();
    let p_phi = enc_phi.store.constants();
    let p_align = align.store.constants();
    let num_classes = align.cfg.num_classes;
    let mut probs = Vec::with_capacity(ds.eval_indices.len());
    for chunk in ds.eval_indices.chunks(CHUNK) {
        let seqs: Vec<_> = chunk.iter().map(|&i| &ds.sequences[i]).collect();
        let x = stack_batch(&seqs);
        let (tok_t, _) = enc_theta.forward(&x, &p_theta, false)?;
        let (tok_p, _) = enc_phi.forward(&x, &p_phi, false)?;
        let pooled = align.align(&tok_t, &tok_p, &p_align)?;
        let logits = align.classify(&pooled, &p_align)?;
        let soft = soften(&logits, 1.0)?;
        for row in 0..chunk.len() {
            probs.push(soft.values()[row * num_classes..(row + 1) * num_classes].to_vec());
        }
    }
    Ok((probs, num_classes))
}

pub struct FusionReport {
    pub per_stream: Vec<(Stream, Real)>,
    pub fused_acc: Real,
}

/// Score-level fusion: derive each stream from the same base sequences,
/// evaluate its checkpoint, and average class probabilities with equal
/// weights before the argmax.
pub fn eval_3stream(
    cfg: &TrainConfig,
    base: &[crate::data::SkeletonSequence],
    ckpts: &[(Stream, std::path::PathBuf)],
) -> Result<FusionReport, TrainError> {
    if ckpts.is_empty() {
        return Err(TrainError::InvalidConfig("no stream checkpoints given".into()));
    }
    let mut fused: Vec<Vec<Real>> = Vec::new();
    let mut per_stream = Vec::new();
    let mut num_classes = 0usize;
    let mut labels: Vec<usize> = Vec::new();
    for (stream, ckpt) in ckpts {
        let mut stream_cfg = cfg.clone();
        stream_cfg.exp.data.stream = *stream;
        let ds = from_sequences(base.to_vec(), *stream)?;
        let (probs, nc) = composite_eval_probs(&stream_cfg, &ds, ckpt)?;
        if num_classes == 0 {
            num_classes = nc;
            fused = vec![vec![0.0; nc]; probs.len()];
            labels = ds.eval_indices.iter().map(|&i| ds.labels[i]).collect();
        } else if nc != num_classes {
            return Err(TrainError::LabelSpaceMismatch(format!(
                "stream {stream} predicts {nc} classes, expected {num_classes}"
            )));
        }
        let flat: Vec<Real> = probs.iter().flatten().copied().collect();
        per_stream.push((*stream, accuracy(&flat, num_classes, &labels)));
        for (f, p) in fused.iter_mut().zip(&probs) {
            for (a, b) in f.iter_mut().zip(p) {
                *a += b;
            }
        }
    }
    let flat: Vec<Real> = fused.into_iter().flatten().collect();
    let fused_acc = accuracy(&flat, num_classes, &labels);
    Ok(FusionReport {
        per_stream,
        fused_acc,
    })
}

/// Equal-weight probability fusion of pre-computed per-model probabilities;
/// exposed for fixture-level tests.
pub fn fuse_probs(prob_sets: &[Vec<Vec<Real>>]) -> Vec<Vec<Real>> {
    let n = prob_sets[0].len();
    let c = prob_sets[0][0].len();
    let mut fused = vec![vec![0.0 as Real; c]; n];
    for set in prob_sets {
        assert_eq!(set.len(), n, "prob sets must cover the same samples");
        for (f, p) in fused.iter_mut().zip(set) {
            assert_eq!(p.len(), c, "label space mismatch in fusion");
            for (a, b) in f.iter_mut().zip(p) {
                *a += b;
            }
        }
    }
    fused
}
