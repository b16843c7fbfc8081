//! Fine-tuning: phase one trains each encoder end-to-end with its own
//! linear head; phase two attaches the alignment module on the tuned
//! encoders and trains it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::dataset::{epoch_batches, stack_batch, Dataset};
use super::metrics::{EpochRecord, MetricsLog, RunRecord};
use super::optim::{lr_at, Adam};
use super::pretrain::PretrainModels;
use super::probe::save_composite;
use super::{Stage, TrainConfig, TrainError};
use crate::ad::Tape;
use crate::nn::align::accuracy;
use crate::nn::{cross_entropy, AlignConfig, AlignHead, Encoder, ParamStore};
use crate::Real;

const TAG_BATCH: u64 = 0xB2;

pub struct FinetuneOutcome {
    /// Held-out accuracy of each end-to-end tuned encoder (theta, phi).
    pub phase1_acc: (Real, Real),
    /// Held-out accuracy after attaching and training the alignment module.
    pub fused_acc: Real,
    pub checkpoint: Option<PathBuf>,
}

/// Run both fine-tuning phases on pretrained models.
pub fn finetune(
    cfg: &TrainConfig,
    ds: &Dataset,
    models: &mut PretrainModels,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut log = MetricsLog::new();

    let acc_theta = tune_one(cfg, ds, &mut models.enc_theta, "finetune_theta", &mut log)?;
    let acc_phi = tune_one(cfg, ds, &mut models.enc_phi, "finetune_phi", &mut log)?;

    // phase two: alignment module on the tuned (now frozen) encoders, at
    // the fuse-stage hyperparameters
    let fuse_cfg = TrainConfig {
        stage: Stage::Probe,
        params: cfg.exp.stages.finetune_fuse.clone(),
        exp: cfg.exp.clone(),
    };
    let probe = super::probe::linear_probe(&fuse_cfg, ds, models, None)?;
    let fused_acc = probe.eval_acc;

    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("finetune.ckpt");
        save_composite(&ckpt, &cfg.exp.arch_digest(), models, &probe.align)?;
        log.write(dir)?;
        let mut finals = BTreeMap::new();
        finals.insert("acc_theta".to_string(), acc_theta);
        finals.insert("acc_phi".to_string(), acc_phi);
        finals.insert("fused_acc".to_string(), fused_acc);
        RunRecord {
            stage: "finetune".into(),
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

    Ok(FinetuneOutcome {
        phase1_acc: (acc_theta, acc_phi),
        fused_acc,
        checkpoint,
    })
}

/// Phase one for a single encoder: end-to-end cross-entropy training with a
/// fresh linear head. Returns the held-out accuracy.
fn tune_one(
    cfg: &TrainConfig,
    ds: &Dataset,
    encoder: &mut Encoder,
    stage_name: &'static str,
    log: &mut MetricsLog,
) -> Result<Real, TrainError> {
    let embed = encoder.cfg.embed_dim;
    let mut head = ParamStore::new();
    let mut rng = crate::util::rng_for(&[cfg.exp.seed, 0xF7, stage_name.len() as u64]);
    head.add_uniform("cls.w", vec![embed, ds.num_classes], embed, &mut rng);
    head.add("cls.b", vec![0.0; ds.num_classes], vec![ds.num_classes], true);
    let mut adam = Adam::new();

    for epoch in 0..cfg.params.epochs {
        let epoch_start = Instant::now();
        let lr = lr_at(epoch, cfg.params.epochs, cfg.params.warmup_epochs, cfg.params.lr);
        let mut ce_sum = 0.0;
        let batches = epoch_batches(
            &ds.train_indices,
            cfg.params.batch_size,
            cfg.exp.seed,
            TAG_BATCH ^ stage_name.len() as u64,
            epoch,
        );
        for batch in &batches {
            let seqs: Vec<_> = batch.iter().map(|&i| &ds.sequences[i]).collect();
            let x = stack_batch(&seqs);
            let tape = Tape::new();
            let p_enc = encoder.store.leaves(&tape);
            let p_head = head.leaves(&tape);
            let (_, pooled) = encoder.forward(&x, &p_enc, true)?;
            let logits = pooled.matmul(p_head.get("cls.w"))?.add(p_head.get("cls.b"))?;
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let loss = cross_entropy(&logits, &labels)?;
            if !loss.item().is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    stage: stage_name,
                    epoch,
                });
            }
            loss.backward()?;
            adam.begin_step();
            adam.step_store("enc", &mut encoder.store, &p_enc.grads(), lr, cfg.params.weight_decay);
            adam.step_store("head", &mut head, &p_head.grads(), lr, cfg.params.weight_decay);
            ce_sum += loss.item();
        }
        let mut losses = BTreeMap::new();
        losses.insert("ce".to_string(), ce_sum / batches.len().max(1) as Real);
        log.push_epoch(&EpochRecord {
            stage: stage_name.into(),
            epoch,
            lr,
            losses,
            acc: None,
        });
        log.push_timing(stage_name, epoch, epoch_start.elapsed().as_millis());
    }

    // held-out accuracy with the trained head
    let p_enc = encoder.store.constants();
    let p_head = head.constants();
    let seqs: Vec<_> = ds.eval_indices.iter().map(|&i| &ds.sequences[i]).collect();
    let (_, pooled) = encoder.forward(&stack_batch(&seqs), &p_enc, false)?;
    let logits = pooled.matmul(p_head.get("cls.w"))?.add(p_head.get("cls.b"))?;
    let labels: Vec<usize> = ds.eval_indices.iter().map(|&i| ds.labels[i]).collect();
    Ok(accuracy(logits.values(), ds.num_classes, &labels))
}

/// Verify that the alignment training in phase two leaves encoder weights
/// untouched when the learning rate is zero (freeze semantics).
pub fn frozen_weights_unchanged(
    cfg: &TrainConfig,
    ds: &Dataset,
    models: &mut PretrainModels,
) -> Result<bool, TrainError> {
    let before = (
        models.enc_theta.store.content_digest(),
        models.enc_phi.store.content_digest(),
    );
    let mut zero_cfg = cfg.clone();
    zero_cfg.params.epochs = 2;
    super::probe::linear_probe(&zero_cfg, ds, models, None)?;
    let after = (
        models.enc_theta.store.content_digest(),
        models.enc_phi.store.content_digest(),
    );
    Ok(before == after)
}

/// An AlignHead over freshly initialized weights, for A/B comparisons.
pub fn fresh_align_head(cfg: &TrainConfig, num_classes: usize) -> Result<AlignHead, TrainError> {
    Ok(AlignHead::new(
        AlignConfig {
            num_heads: cfg.exp.model.num_heads,
            model_dim: cfg.exp.model.embed_dim,
            num_classes,
        },
        cfg.exp.seed ^ 0xA12,
    )?)
}
