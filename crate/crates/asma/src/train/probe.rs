//! Linear probing: encoders frozen (eval-mode batch norm), the alignment
//! module and classifier trained with cross-entropy on cached encoder
//! tokens.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::dataset::{epoch_batches, stack_batch, stack_rows, Dataset};
use super::metrics::{EpochRecord, MetricsLog, RunRecord};
use super::optim::{lr_at, Adam};
use super::pretrain::{encoder_config, PretrainModels};
use super::{TrainConfig, TrainError};
use crate::ad::{Tape, Tensor};
use crate::nn::align::accuracy;
use crate::nn::{
    cross_entropy, load_checkpoint, save_checkpoint, AlignConfig, AlignHead, Encoder,
    ModelError, Projector,
};
use crate::Real;

const TAG_BATCH: u64 = 0xB1;
/// Samples per forward pass when caching frozen-encoder features.
const CACHE_CHUNK: usize = 32;

/// Load pretrained encoders (and projectors) from a checkpoint, verifying
/// the architecture digest.
pub fn load_models(
    cfg: &TrainConfig,
    ds: &Dataset,
    ckpt: &Path,
) -> Result<PretrainModels, TrainError> {
    let (digest, mut parts) = load_checkpoint(ckpt)?;
    let expected = cfg.exp.arch_digest();
    if digest != expected {
        return Err(ModelError::CheckpointMismatch {
            expected,
            found: digest,
        }
        .into());
    }
    let enc_cfg = encoder_config(cfg, ds);
    let take = |parts: &mut std::collections::HashMap<String, crate::nn::ParamStore>,
                name: &str|
     -> Result<crate::nn::ParamStore, TrainError> {
        parts
            .remove(name)
            .ok_or_else(|| ModelError::BadCheckpoint(format!("missing part {name}")).into())
    };
    let enc_theta = Encoder::from_store(enc_cfg.clone(), &ds.graph, take(&mut parts, "enc_theta")?)?;
    let enc_phi = Encoder::from_store(enc_cfg, &ds.graph, take(&mut parts, "enc_phi")?)?;
    let mut proj_cfg = cfg.exp.model.projector.clone();
    proj_cfg.in_dim = cfg.exp.model.embed_dim;
    let mut projectors = vec![Projector::from_store(
        proj_cfg.clone(),
        take(&mut parts, "proj_theta")?,
    )];
    if let Some(store) = parts.remove("proj_phi") {
        projectors.push(Projector::from_store(proj_cfg, store));
    }
    Ok(PretrainModels {
        enc_theta,
        enc_phi,
        projectors,
    })
}

/// Frozen-encoder features for every sample: per-sample token rows
/// (`L x D` flattened) for both encoders, plus pooled embeddings.
pub struct CachedFeatures {
    pub tokens_theta: Vec<Vec<Real>>,
    pub tokens_phi: Vec<Vec<Real>>,
    pub pooled_theta: Vec<Vec<Real>>,
    pub pooled_phi: Vec<Vec<Real>>,
    pub token_shape: [usize; 2],
}

pub fn cache_features(
    models: &mut PretrainModels,
    ds: &Dataset,
) -> Result<CachedFeatures, TrainError> {
    let n = ds.sequences.len();
    let mut out = CachedFeatures {
        tokens_theta: Vec::with_capacity(n),
        tokens_phi: Vec::with_capacity(n),
        pooled_theta: Vec::with_capacity(n),
        pooled_phi: Vec::with_capacity(n),
        token_shape: [0, 0],
    };
    let p_theta = models.enc_theta.store.constants();
    let p_phi = models.enc_phi.store.constants();
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(CACHE_CHUNK) {
        let seqs: Vec<_> = chunk.iter().map(|&i| &ds.sequences[i]).collect();
        let x = stack_batch(&seqs);
        let (tok_t, pool_t) = models.enc_theta.forward(&x, &p_theta, false)?;
        let (tok_p, pool_p) = models.enc_phi.forward(&x, &p_phi, false)?;
        let (l, d) = (tok_t.shape()[1], tok_t.shape()[2]);
        out.token_shape = [l, d];
        for (row, _) in chunk.iter().enumerate() {
            out.tokens_theta
                .push(tok_t.values()[row * l * d..(row + 1) * l * d].to_vec());
            out.tokens_phi
                .push(tok_p.values()[row * l * d..(row + 1) * l * d].to_vec());
            out.pooled_theta
                .push(pool_t.values()[row * d..(row + 1) * d].to_vec());
            out.pooled_phi
                .push(pool_p.values()[row * d..(row + 1) * d].to_vec());
        }
    }
    Ok(out)
}

pub struct ProbeOutcome {
    pub eval_acc: Real,
    pub train_acc: Real,
    pub align: AlignHead,
    pub checkpoint: Option<PathBuf>,
}

/// Train the alignment module + classifier on frozen encoders and report
/// held-out top-1 accuracy. When `out_dir` is set, saves `probe.ckpt`
/// containing the frozen encoders plus the trained head (a self-contained
/// classification model).
pub fn linear_probe(
    cfg: &TrainConfig,
    ds: &Dataset,
    models: &mut PretrainModels,
    out_dir: Option<&Path>,
) -> Result<ProbeOutcome, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let frozen_before = (
        models.enc_theta.store.content_digest(),
        models.enc_phi.store.content_digest(),
    );
    let feats = cache_features(models, ds)?;
    let align_cfg = AlignConfig {
        num_heads: cfg.exp.model.num_heads,
        model_dim: cfg.exp.model.embed_dim,
        num_classes: ds.num_classes,
    };
    let mut align = AlignHead::new(align_cfg, cfg.exp.seed ^ 0xA11)?;
    let mut adam = Adam::new();
    let mut log = MetricsLog::new();
    let [l, d] = feats.token_shape;

    let mut forward_logits = |align: &AlignHead,
                              params: &crate::nn::ParamTensors,
                              idxs: &[usize]|
     -> Result<Tensor, TrainError> {
        let rows_t: Vec<&[Real]> = idxs.iter().map(|&i| feats.tokens_theta[i].as_slice()).collect();
        let rows_p: Vec<&[Real]> = idxs.iter().map(|&i| feats.tokens_phi[i].as_slice()).collect();
        let h_t = stack_rows(&rows_t, &[l, d]);
        let h_p = stack_rows(&rows_p, &[l, d]);
        let pooled = align.align(&h_t, &h_p, params)?;
        Ok(align.classify(&pooled, params)?)
    };

    for epoch in 0..cfg.params.epochs {
        let epoch_start = Instant::now();
        let lr = lr_at(epoch, cfg.params.epochs, cfg.params.warmup_epochs, cfg.params.lr);
        let batches = epoch_batches(
            &ds.train_indices,
            cfg.params.batch_size,
            cfg.exp.seed,
            TAG_BATCH,
            epoch,
        );
        let mut ce_sum = 0.0;
        for batch in &batches {
            let tape = Tape::new();
            let params = align.store.leaves(&tape);
            let logits = forward_logits(&align, &params, batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let loss = cross_entropy(&logits, &labels)?;
            if !loss.item().is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    stage: "probe",
                    epoch,
                });
            }
            loss.backward()?;
            adam.begin_step();
            adam.step_store(
                "align",
                &mut align.store,
                &params.grads(),
                lr,
                cfg.params.weight_decay,
            );
            ce_sum += loss.item();
        }
        let eval_acc = eval_accuracy(&align, &feats, ds, &ds.eval_indices, &mut forward_logits)?;
        let mut losses = BTreeMap::new();
        losses.insert("ce".to_string(), ce_sum / batches.len().max(1) as Real);
        log.push_epoch(&EpochRecord {
            stage: "probe".into(),
            epoch,
            lr,
            losses,
            acc: Some(eval_acc),
        });
        log.push_timing("probe", epoch, epoch_start.elapsed().as_millis());
    }

    let params = align.store.constants();
    let eval_logits = forward_logits(&align, &params, &ds.eval_indices)?;
    let eval_labels: Vec<usize> = ds.eval_indices.iter().map(|&i| ds.labels[i]).collect();
    let eval_acc = accuracy(eval_logits.values(), ds.num_classes, &eval_labels);
    let train_logits = forward_logits(&align, &params, &ds.train_indices)?;
    let train_labels: Vec<usize> = ds.train_indices.iter().map(|&i| ds.labels[i]).collect();
    let train_acc = accuracy(train_logits.values(), ds.num_classes, &train_labels);

    // probing must not have touched the encoders
    let frozen_after = (
        models.enc_theta.store.content_digest(),
        models.enc_phi.store.content_digest(),
    );
    assert_eq!(frozen_before, frozen_after, "probe mutated frozen encoders");

    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("probe.ckpt");
        save_composite(&ckpt, &cfg.exp.arch_digest(), models, &align)?;
        log.write(dir)?;
        let mut finals = BTreeMap::new();
        finals.insert("eval_acc".to_string(), eval_acc);
        finals.insert("train_acc".to_string(), train_acc);
        RunRecord {
            stage: "probe".into(),
            config_digest: cfg.digest(),
            seed: cfg.exp.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            epochs: cfg.params.epochs,
            finals,
            checkpoint: Some(ckpt.clone()),
            wall_ms: start.elapsed().as_millis(),
        }
        .write(dir)?;
        checkpoint = Some(ckpt);
    }

    Ok(ProbeOutcome {
        eval_acc,
        train_acc,
        align,
        checkpoint,
    })
}

fn eval_accuracy(
    align: &AlignHead,
    _feats: &CachedFeatures,
    ds: &Dataset,
    indices: &[usize],
    forward_logits: &mut impl FnMut(
        &AlignHead,
        &crate::nn::ParamTensors,
        &[usize],
    ) -> Result<Tensor, TrainError>,
) -> Result<Real, TrainError> {
    let params = align.store.constants();
    let logits = forward_logits(align, &params, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
    Ok(accuracy(logits.values(), ds.num_classes, &labels))
}

/// Save a self-contained classifier: both encoders plus the alignment head.
pub fn save_composite(
    path: &Path,
    digest: &str,
    models: &PretrainModels,
    align: &AlignHead,
) -> Result<(), TrainError> {
    save_checkpoint(
        path,
        digest,
        &[
            ("enc_theta", &models.enc_theta.store),
            ("enc_phi", &models.enc_phi.store),
            ("align", &align.store),
        ],
    )?;
    Ok(())
}

/// Load a composite classifier saved by [`save_composite`].
pub fn load_composite(
    cfg: &TrainConfig,
    ds: &Dataset,
    ckpt: &Path,
) -> Result<(Encoder, Encoder, AlignHead), TrainError> {
    let (digest, mut parts) = load_checkpoint(ckpt)?;
    let expected = cfg.exp.arch_digest();
    if digest != expected {
        return Err(ModelError::CheckpointMismatch {
            expected,
            found: digest,
        }
        .into());
    }
    let enc_cfg = encoder_config(cfg, ds);
    let missing =
        |name: &str| -> TrainError { ModelError::BadCheckpoint(format!("missing part {name}")).into() };
    let enc_theta = Encoder::from_store(
        enc_cfg.clone(),
        &ds.graph,
        parts.remove("enc_theta").ok_or_else(|| missing("enc_theta"))?,
    )?;
    let enc_phi = Encoder::from_store(
        enc_cfg,
        &ds.graph,
        parts.remove("enc_phi").ok_or_else(|| missing("enc_phi"))?,
    )?;
    let align_store = parts.remove("align").ok_or_else(|| missing("align"))?;
    let num_classes = align_store.entry("cls.b").values.len();
    let align = AlignHead::from_store(
        AlignConfig {
            num_heads: cfg.exp.model.num_heads,
            model_dim: cfg.exp.model.embed_dim,
            num_classes,
        },
        align_store,
    )?;
    Ok((enc_theta, enc_phi, align))
}

/// Plain linear probe of a single encoder: a linear head on the pooled
/// embedding, encoders frozen. Returns held-out accuracy.
pub fn single_encoder_probe(
    cfg: &TrainConfig,
    ds: &Dataset,
    encoder: &mut Encoder,
) -> Result<Real, TrainError> {
    let embed = encoder.cfg.embed_dim;
    let params = encoder.store.constants();
    let mut pooled_rows: Vec<Vec<Real>> = Vec::with_capacity(ds.sequences.len());
    let indices: Vec<usize> = (0..ds.sequences.len()).collect();
    for chunk in indices.chunks(CACHE_CHUNK) {
        let seqs: Vec<_> = chunk.iter().map(|&i| &ds.sequences[i]).collect();
        let (_, pooled) = encoder.forward(&stack_batch(&seqs), &params, false)?;
        for row in 0..chunk.len() {
            pooled_rows.push(pooled.values()[row * embed..(row + 1) * embed].to_vec());
        }
    }

    let mut head = crate::nn::ParamStore::new();
    let mut rng = crate::util::rng_for(&[cfg.exp.seed, 0x51]);
    head.add_uniform("cls.w", vec![embed, ds.num_classes], embed, &mut rng);
    head.add("cls.b", vec![0.0; ds.num_classes], vec![ds.num_classes], true);
    let mut adam = Adam::new();
    for epoch in 0..cfg.params.epochs {
        let lr = lr_at(epoch, cfg.params.epochs, cfg.params.warmup_epochs, cfg.params.lr);
        for batch in epoch_batches(
            &ds.train_indices,
            cfg.params.batch_size,
            cfg.exp.seed,
            TAG_BATCH ^ 0x5E,
            epoch,
        ) {
            let tape = Tape::new();
            let p = head.leaves(&tape);
            let rows: Vec<&[Real]> = batch.iter().map(|&i| pooled_rows[i].as_slice()).collect();
            let h = stack_rows(&rows, &[embed]);
            let logits = h.matmul(p.get("cls.w"))?.add(p.get("cls.b"))?;
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let loss = cross_entropy(&logits, &labels)?;
            loss.backward()?;
            adam.begin_step();
            adam.step_store("head", &mut head, &p.grads(), lr, cfg.params.weight_decay);
        }
    }
    let p = head.constants();
    let rows: Vec<&[Real]> = ds.eval_indices.iter().map(|&i| pooled_rows[i].as_slice()).collect();
    let h = stack_rows(&rows, &[embed]);
    let logits = h.matmul(p.get("cls.w"))?.add(p.get("cls.b"))?;
    let labels: Vec<usize> = ds.eval_indices.iter().map(|&i| ds.labels[i]).collect();
    Ok(accuracy(logits.values(), ds.num_classes, &labels))
}
