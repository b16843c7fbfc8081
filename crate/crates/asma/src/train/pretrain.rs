//! Joint self-supervised pretraining of the two encoders against the
//! triplet-stream redundancy-reduction objective with asymmetric masks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::dataset::{epoch_batches, stack_batch, Dataset};
use super::metrics::{EpochRecord, MetricsLog, RunRecord, StepRecord};
use super::optim::{lr_at, Adam};
use super::{TrainConfig, TrainError};
use crate::ad::Tape;
use crate::masking::make_asymmetric_views;
use crate::nn::encoder::EncoderConfig;
use crate::nn::ssl::asma_pretrain_loss;
use crate::nn::{save_checkpoint, Encoder, Projector};
use crate::util::rng_for;
use crate::Real;

const TAG_BATCH: u64 = 0xB0;
const TAG_VIEWS: u64 = 0xF0;

/// The trained pair of encoders and their projectors.
pub struct PretrainModels {
    pub enc_theta: Encoder,
    pub enc_phi: Encoder,
    /// One projector when shared across encoders, two otherwise.
    pub projectors: Vec<Projector>,
}

impl PretrainModels {
    pub fn projector_index(&self, phi: bool) -> usize {
        if self.projectors.len() == 1 {
            0
        } else {
            phi as usize
        }
    }
}

pub struct PretrainOutcome {
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<Real>,
    pub models: PretrainModels,
    pub checkpoint: Option<PathBuf>,
}

pub fn encoder_config(cfg: &TrainConfig, ds: &Dataset) -> EncoderConfig {
    EncoderConfig {
        num_layers: cfg.exp.model.num_layers,
        hidden_channels: cfg.exp.model.hidden_channels,
        spatial_kernel: cfg.exp.model.spatial_kernel,
        temporal_kernel: cfg.exp.model.temporal_kernel,
        in_channels: ds.channels(),
        embed_dim: cfg.exp.model.embed_dim,
        num_joints: ds.graph.num_joints,
    }
}

/// Fresh (randomly initialized) pretraining models for the given config.
pub fn init_models(cfg: &TrainConfig, ds: &Dataset) -> Result<PretrainModels, TrainError> {
    let enc_cfg = encoder_config(cfg, ds);
    let seed = cfg.exp.seed;
    let enc_theta = Encoder::new(enc_cfg.clone(), &ds.graph, seed ^ 0x7E7A)?;
    let enc_phi = Encoder::new(enc_cfg, &ds.graph, seed ^ 0xF1)?;
    let mut proj_cfg = cfg.exp.model.projector.clone();
    proj_cfg.in_dim = cfg.exp.model.embed_dim;
    let mut projectors = vec![Projector::new(proj_cfg.clone(), seed ^ 0x9801)?];
    if !cfg.exp.model.share_projector {
        projectors.push(Projector::new(proj_cfg, seed ^ 0x9802)?);
    }
    Ok(PretrainModels {
        enc_theta,
        enc_phi,
        projectors,
    })
}

/// Run pretraining. When `out_dir` is set, writes `metrics.jsonl`,
/// `run.json` and `pretrain.ckpt` there. `log_steps` adds one record per
/// optimization step with the four loss terms.
pub fn pretrain(
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
    log_steps: bool,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    if ds.sequences.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    let start = Instant::now();
    let mut models = init_models(cfg, ds)?;
    let mut adam = Adam::new();
    let mut log = MetricsLog::new();
    let mut epoch_losses = Vec::with_capacity(cfg.params.epochs);
    let seed = cfg.exp.seed;
    let theta_spec = cfg.exp.masking.theta_spec(seed);
    let phi_spec = cfg.exp.masking.phi_spec(seed);
    let mut global_step = 0usize;

    for epoch in 0..cfg.params.epochs {
        let epoch_start = Instant::now();
        let lr = lr_at(epoch, cfg.params.epochs, cfg.params.warmup_epochs, cfg.params.lr);
        let batches = epoch_batches(
            &ds.train_indices,
            cfg.params.batch_size,
            seed,
            TAG_BATCH,
            epoch,
        );
        let mut sums = [0.0 as Real; 5]; // l1t, l2t, l1p, l2p, total
        for batch in &batches {
            let draw_epoch = if cfg.exp.masking.redraw_per_epoch { epoch } else { 0 };
            let mut anchors = Vec::with_capacity(batch.len());
            let mut sj_t = Vec::with_capacity(batch.len());
            let mut tm_t = Vec::with_capacity(batch.len());
            let mut sj_p = Vec::with_capacity(batch.len());
            let mut tm_p = Vec::with_capacity(batch.len());
            for &idx in batch {
                let mut rng = rng_for(&[seed, TAG_VIEWS, idx as u64, draw_epoch as u64]);
                let views = make_asymmetric_views(
                    &ds.sequences[idx],
                    &theta_spec,
                    &phi_spec,
                    &cfg.exp.augment,
                    &mut rng,
                )?;
                anchors.push(views.anchor);
                sj_t.push(views.spatial_theta);
                tm_t.push(views.temporal_theta);
                sj_p.push(views.spatial_phi);
                tm_p.push(views.temporal_phi);
            }
            let x_anchor = stack_batch(&anchors.iter().collect::<Vec<_>>());
            let x_j_theta = stack_batch(&sj_t.iter().collect::<Vec<_>>());
            let x_m_theta = stack_batch(&tm_t.iter().collect::<Vec<_>>());
            let x_j_phi = stack_batch(&sj_p.iter().collect::<Vec<_>>());
            let x_m_phi = stack_batch(&tm_p.iter().collect::<Vec<_>>());

            let tape = Tape::new();
            let p_theta = models.enc_theta.store.leaves(&tape);
            let p_phi = models.enc_phi.store.leaves(&tape);
            let p_proj: Vec<_> = models
                .projectors
                .iter()
                .map(|p| p.store.leaves(&tape))
                .collect();
            let it = models.projector_index(false);
            let ip = models.projector_index(true);

            let (_, h_theta) = models.enc_theta.forward(&x_anchor, &p_theta, true)?;
            let (_, h_j_theta) = models.enc_theta.forward(&x_j_theta, &p_theta, true)?;
            let (_, h_m_theta) = models.enc_theta.forward(&x_m_theta, &p_theta, true)?;
            let (_, h_phi) = models.enc_phi.forward(&x_anchor, &p_phi, true)?;
            let (_, h_j_phi) = models.enc_phi.forward(&x_j_phi, &p_phi, true)?;
            let (_, h_m_phi) = models.enc_phi.forward(&x_m_phi, &p_phi, true)?;

            let z_theta = models.projectors[it].forward(&h_theta, &p_proj[it], true)?;
            let z_j_theta = models.projectors[it].forward(&h_j_theta, &p_proj[it], true)?;
            let z_m_theta = models.projectors[it].forward(&h_m_theta, &p_proj[it], true)?;
            let z_phi = models.projectors[ip].forward(&h_phi, &p_proj[ip], true)?;
            let z_j_phi = models.projectors[ip].forward(&h_j_phi, &p_proj[ip], true)?;
            let z_m_phi = models.projectors[ip].forward(&h_m_phi, &p_proj[ip], true)?;

            let (total, parts) = asma_pretrain_loss(
                &z_theta,
                &z_j_theta,
                &z_m_theta,
                &z_phi,
                &z_j_phi,
                &z_m_phi,
                &cfg.exp.barlow,
            )?;
            if !parts.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    stage: "pretrain",
                    epoch,
                });
            }
            total.backward()?;

            adam.begin_step();
            adam.step_store(
                "enc_theta",
                &mut models.enc_theta.store,
                &p_theta.grads(),
                lr,
                cfg.params.weight_decay,
            );
            adam.step_store(
                "enc_phi",
                &mut models.enc_phi.store,
                &p_phi.grads(),
                lr,
                cfg.params.weight_decay,
            );
            for (i, p) in p_proj.iter().enumerate() {
                adam.step_store(
                    &format!("proj{i}"),
                    &mut models.projectors[i].store,
                    &p.grads(),
                    lr,
                    cfg.params.weight_decay,
                );
            }

            sums[0] += parts.l1_theta;
            sums[1] += parts.l2_theta;
            sums[2] += parts.l1_phi;
            sums[3] += parts.l2_phi;
            sums[4] += parts.total;
            if log_steps {
                log.push_step(&StepRecord {
                    step: global_step,
                    l1_theta: parts.l1_theta,
                    l2_theta: parts.l2_theta,
                    l1_phi: parts.l1_phi,
                    l2_phi: parts.l2_phi,
                    total: parts.total,
                });
            }
            global_step += 1;
        }
        let nb = batches.len().max(1) as Real;
        let mut losses = BTreeMap::new();
        losses.insert("L1_theta".to_string(), sums[0] / nb);
        losses.insert("L2_theta".to_string(), sums[1] / nb);
        losses.insert("L1_phi".to_string(), sums[2] / nb);
        losses.insert("L2_phi".to_string(), sums[3] / nb);
        losses.insert("total".to_string(), sums[4] / nb);
        epoch_losses.push(sums[4] / nb);
        log.push_epoch(&EpochRecord {
            stage: "pretrain".into(),
            epoch,
            lr,
            losses,
            acc: None,
        });
        log.push_timing("pretrain", epoch, epoch_start.elapsed().as_millis());
    }

    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("pretrain.ckpt");
        save_models(&ckpt, &cfg.exp.arch_digest(), &models)?;
        log.write(dir)?;
        let mut finals = BTreeMap::new();
        finals.insert("loss".to_string(), *epoch_losses.last().unwrap());
        RunRecord {
            stage: "pretrain".into(),
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

    Ok(PretrainOutcome {
        epoch_losses,
        models,
        checkpoint,
    })
}

pub fn save_models(
    path: &Path,
    digest: &str,
    models: &PretrainModels,
) -> Result<(), TrainError> {
    let mut parts = vec![
        ("enc_theta", &models.enc_theta.store),
        ("enc_phi", &models.enc_phi.store),
    ];
    parts.push(("proj_theta", &models.projectors[0].store));
    if models.projectors.len() > 1 {
        parts.push(("proj_phi", &models.projectors[1].store));
    }
    save_checkpoint(path, digest, &parts)?;
    Ok(())
}
