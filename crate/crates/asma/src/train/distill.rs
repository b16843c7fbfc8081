//! Knowledge distillation: a compact student encoder trained against the
//! frozen composite teacher (encoders + alignment + classifier), either on
//! temperature-scaled logits (KL) or on aligned features (cosine).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::dataset::{epoch_batches, stack_batch, stack_rows, Dataset};
use super::metrics::{EpochRecord, MetricsLog, RunRecord};
use super::optim::{lr_at, Adam};
use super::probe::load_composite;
use super::{TrainConfig, TrainError};
use crate::ad::Tape;
use crate::nn::align::accuracy;
use crate::nn::encoder::EncoderConfig;
use crate::nn::{
    cross_entropy, feature_distill_loss, kd_loss, save_checkpoint, soften, AlignHead,
    DistillMode, Encoder, ParamStore,
};
use crate::util::rng_for;
use crate::Real;

const TAG_BATCH: u64 = 0xB3;
const CACHE_CHUNK: usize = 32;

pub struct DistillOutcome {
    pub student_acc: Real,
    pub teacher_acc: Real,
    pub student_params: usize,
    pub teacher_params: usize,
    pub checkpoint: Option<PathBuf>,
}

pub fn student_config(cfg: &TrainConfig, ds: &Dataset) -> EncoderConfig {
    EncoderConfig {
        num_layers: cfg.exp.model.student_layers,
        hidden_channels: cfg.exp.model.student_hidden,
        spatial_kernel: cfg.exp.model.spatial_kernel,
        temporal_kernel: cfg.exp.model.temporal_kernel,
        in_channels: ds.channels(),
        embed_dim: cfg.exp.model.student_embed,
        num_joints: ds.graph.num_joints,
    }
}

/// Teacher outputs cached once over the whole dataset.
struct TeacherOutputs {
    logits: Vec<Vec<Real>>,
    aligned: Vec<Vec<Real>>,
    eval_acc: Real,
    num_params: usize,
    num_classes: usize,
}

fn run_teacher(
    enc_theta: &mut Encoder,
    enc_phi: &mut Encoder,
    align: &AlignHead,
    ds: &Dataset,
) -> Result<TeacherOutputs, TrainError> {
    let p_theta = enc_theta.store.constants();
    let p_phi = enc_phi.store.constants();
    let p_align = align.store.constants();
    let n = ds.sequences.len();
    let mut logits_rows = Vec::with_capacity(n);
    let mut aligned_rows = Vec::with_capacity(n);
    let num_classes = align.cfg.num_classes;
    let d = align.cfg.model_dim;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(CACHE_CHUNK) {
        let seqs: Vec<_> = chunk.iter().map(|&i| &ds.sequences[i]).collect();
        let x = stack_batch(&seqs);
        let (tok_t, _) = enc_theta.forward(&x, &p_theta, false)?;
        let (tok_p, _) = enc_phi.forward(&x, &p_phi, false)?;
        let pooled = align.align(&tok_t, &tok_p, &p_align)?;
        let logits = align.classify(&pooled, &p_align)?;
        for row in 0..chunk.len() {
            logits_rows.push(logits.values()[row * num_classes..(row + 1) * num_classes].to_vec());
            aligned_rows.push(pooled.values()[row * d..(row + 1) * d].to_vec());
        }
    }
    let eval_labels: Vec<usize> = ds.eval_indices.iter().map(|&i| ds.labels[i]).collect();
    let eval_logits: Vec<Real> = ds
        .eval_indices
        .iter()
        .flat_map(|&i| logits_rows[i].iter().copied())
        .collect();
    let eval_acc = accuracy(&eval_logits, num_classes, &eval_labels);
    let num_params = enc_theta.count_params() + enc_phi.count_params() + align.count_params();
    Ok(TeacherOutputs {
        logits: logits_rows,
        aligned: aligned_rows,
        eval_acc,
        num_params,
        num_classes,
    })
}

/// Distill a student from a composite teacher checkpoint (as produced by
/// the probe or finetune stages).
pub fn distill_stage(
    cfg: &TrainConfig,
    ds: &Dataset,
    teacher_ckpt: &Path,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome, TrainError> {
    cfg.validate()?;
    let (mut enc_theta, mut enc_phi, align) = load_composite(cfg, ds, teacher_ckpt)?;
    let teacher = run_teacher(&mut enc_theta, &mut enc_phi, &align, ds)?;
    distill_from_teacher(cfg, ds, &teacher, out_dir)
}

fn distill_from_teacher(
    cfg: &TrainConfig,
    ds: &Dataset,
    teacher: &TeacherOutputs,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome, TrainError> {
    let start = Instant::now();
    let num_classes = teacher.num_classes;
    if num_classes != ds.num_classes {
        return Err(TrainError::LabelSpaceMismatch(format!(
            "teacher has {num_classes} classes, dataset has {}",
            ds.num_classes
        )));
    }
    let mut student = Encoder::new(student_config(cfg, ds), &ds.graph, cfg.exp.seed ^ 0x57)?;
    let s_embed = student.cfg.embed_dim;
    let mut head = ParamStore::new();
    let mut rng = rng_for(&[cfg.exp.seed, 0x58]);
    head.add_uniform("cls.w", vec![s_embed, num_classes], s_embed, &mut rng);
    head.add("cls.b", vec![0.0; num_classes], vec![num_classes], true);
    // teacher-feature projection, used by the cosine mode
    let teacher_d = teacher.aligned[0].len();
    let mut proj = ParamStore::new();
    proj.add_uniform("w", vec![teacher_d, s_embed], teacher_d, &mut rng);
    proj.add("b", vec![0.0; s_embed], vec![s_embed], true);

    let mode = cfg.exp.distill.mode;
    let mut adam = Adam::new();
    let mut log = MetricsLog::new();

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
        let mut loss_sum = 0.0;
        for batch in &batches {
            let seqs: Vec<_> = batch.iter().map(|&i| &ds.sequences[i]).collect();
            let x = stack_batch(&seqs);
            let tape = Tape::new();
            let p_enc = student.store.leaves(&tape);
            let p_head = head.leaves(&tape);
            let (_, pooled) = student.forward(&x, &p_enc, true)?;
            let loss = match mode {
                DistillMode::LogitKl => {
                    let s_logits = pooled.matmul(p_head.get("cls.w"))?.add(p_head.get("cls.b"))?;
                    let t_rows: Vec<&[Real]> =
                        batch.iter().map(|&i| teacher.logits[i].as_slice()).collect();
                    let t_logits = stack_rows(&t_rows, &[num_classes]);
                    kd_loss(&s_logits, &t_logits, &cfg.exp.distill)?
                }
                DistillMode::FeatureCosine => {
                    let p_proj = proj.leaves(&tape);
                    let t_rows: Vec<&[Real]> =
                        batch.iter().map(|&i| teacher.aligned[i].as_slice()).collect();
                    let h_t = stack_rows(&t_rows, &[teacher_d]);
                    let l = feature_distill_loss(
                        &pooled,
                        &h_t,
                        p_proj.get("w"),
                        p_proj.get("b"),
                    )?;
                    // the projection trains together with the student
                    let g = p_proj;
                    let loss = l;
                    loss.backward()?;
                    adam.begin_step();
                    adam.step_store("student", &mut student.store, &p_enc.grads(), lr, cfg.params.weight_decay);
                    adam.step_store("proj", &mut proj, &g.grads(), lr, cfg.params.weight_decay);
                    loss_sum += loss.item();
                    continue;
                }
            };
            if !loss.item().is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    stage: "distill",
                    epoch,
                });
            }
            loss.backward()?;
            adam.begin_step();
            adam.step_store(
                "student",
                &mut student.store,
                &p_enc.grads(),
                lr,
                cfg.params.weight_decay,
            );
            adam.step_store("head", &mut head, &p_head.grads(), lr, cfg.params.weight_decay);
            loss_sum += loss.item();
        }
        let mut losses = BTreeMap::new();
        losses.insert("kd_loss".to_string(), loss_sum / batches.len().max(1) as Real);
        losses.insert("tau".to_string(), cfg.exp.distill.tau);
        log.push_epoch(&EpochRecord {
            stage: "distill".into(),
            epoch,
            lr,
            losses,
            acc: None,
        });
        log.push_timing("distill", epoch, epoch_start.elapsed().as_millis());
    }

    // the cosine mode has no KD-trained classifier; fit a linear readout on
    // the frozen student features
    if mode == DistillMode::FeatureCosine {
        head = fit_readout(cfg, ds, &mut student, num_classes)?;
    }

    let student_acc = student_accuracy(&mut student, &head, ds)?;
    let student_params = student.count_params() + head.num_learnable_scalars();

    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("student.ckpt");
        save_checkpoint(
            &ckpt,
            &cfg.exp.arch_digest(),
            &[("student", &student.store), ("head", &head)],
        )?;
        log.write(dir)?;
        let mut finals = BTreeMap::new();
        finals.insert("student_acc".to_string(), student_acc);
        finals.insert("teacher_acc".to_string(), teacher.eval_acc);
        finals.insert("student_params".to_string(), student_params as Real);
        finals.insert("teacher_params".to_string(), teacher.num_params as Real);
        RunRecord {
            stage: "distill".into(),
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

    Ok(DistillOutcome {
        student_acc,
        teacher_acc: teacher.eval_acc,
        student_params,
        teacher_params: teacher.num_params,
        checkpoint,
    })
}

fn student_accuracy(
    student: &mut Encoder,
    head: &ParamStore,
    ds: &Dataset,
) -> Result<Real, TrainError> {
    let p_enc = student.store.constants();
    let p_head = head.constants();
    let seqs: Vec<_> = ds.eval_indices.iter().map(|&i| &ds.sequences[i]).collect();
    let (_, pooled) = student.forward(&stack_batch(&seqs), &p_enc, false)?;
    let logits = pooled.matmul(p_head.get("cls.w"))?.add(p_head.get("cls.b"))?;
    let labels: Vec<usize> = ds.eval_indices.iter().map(|&i| ds.labels[i]).collect();
    Ok(accuracy(logits.values(), ds.num_classes, &labels))
}

/// Linear readout on frozen student features (used by the cosine mode,
/// which trains no classifier during distillation).
fn fit_readout(
    cfg: &TrainConfig,
    ds: &Dataset,
    student: &mut Encoder,
    num_classes: usize,
) -> Result<ParamStore, TrainError> {
    let embed = student.cfg.embed_dim;
    let p_enc = student.store.constants();
    let mut rows: Vec<Vec<Real>> = Vec::with_capacity(ds.sequences.len());
    let indices: Vec<usize> = (0..ds.sequences.len()).collect();
    for chunk in indices.chunks(CACHE_CHUNK) {
        let seqs: Vec<_> = chunk.iter().map(|&i| &ds.sequences[i]).collect();
        let (_, pooled) = student.forward(&stack_batch(&seqs), &p_enc, false)?;
        for row in 0..chunk.len() {
            rows.push(pooled.values()[row * embed..(row + 1) * embed].to_vec());
        }
    }
    let mut head = ParamStore::new();
    let mut rng = rng_for(&[cfg.exp.seed, 0x59]);
    head.add_uniform("cls.w", vec![embed, num_classes], embed, &mut rng);
    head.add("cls.b", vec![0.0; num_classes], vec![num_classes], true);
    let mut adam = Adam::new();
    let epochs = 30;
    for epoch in 0..epochs {
        let lr = lr_at(epoch, epochs, 0, 1e-2);
        for batch in epoch_batches(&ds.train_indices, cfg.params.batch_size, cfg.exp.seed, 0x5A, epoch) {
            let tape = Tape::new();
            let p = head.leaves(&tape);
            let r: Vec<&[Real]> = batch.iter().map(|&i| rows[i].as_slice()).collect();
            let h = stack_rows(&r, &[embed]);
            let logits = h.matmul(p.get("cls.w"))?.add(p.get("cls.b"))?;
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let loss = cross_entropy(&logits, &labels)?;
            loss.backward()?;
            adam.begin_step();
            adam.step_store("readout", &mut head, &p.grads(), lr, 0.0);
        }
    }
    Ok(head)
}

/// Student eval-split probabilities from a student checkpoint (softmax of
/// the KD-trained classifier logits at temperature 1).
pub fn student_eval_probs(
    cfg: &TrainConfig,
    ds: &Dataset,
    ckpt: &Path,
) -> Result<(Vec<Vec<Real>>, usize), TrainError> {
    let (digest, mut parts) = crate::nn::load_checkpoint(ckpt)?;
    let expected = cfg.exp.arch_digest();
    if digest != expected {
        return Err(crate::nn::ModelError::CheckpointMismatch {
            expected,
            found: digest,
        }
        .into());
    }
    let store = parts
        .remove("student")
        .ok_or_else(|| crate::nn::ModelError::BadCheckpoint("missing part student".into()))?;
    let head = parts
        .remove("head")
        .ok_or_else(|| crate::nn::ModelError::BadCheckpoint("missing part head".into()))?;
    let mut student = Encoder::from_store(student_config(cfg, ds), &ds.graph, store)?;
    let num_classes = head.entry("cls.b").values.len();
    let p_enc = student.store.constants();
    let p_head = head.constants();
    let mut probs = Vec::with_capacity(ds.eval_indices.len());
    for chunk in ds.eval_indices.chunks(CACHE_CHUNK) {
        let seqs: Vec<_> = chunk.iter().map(|&i| &ds.sequences[i]).collect();
        let (_, pooled) = student.forward(&stack_batch(&seqs), &p_enc, false)?;
        let logits = pooled.matmul(p_head.get("cls.w"))?.add(p_head.get("cls.b"))?;
        let soft = soften(&logits, 1.0)?;
        for row in 0..chunk.len() {
            probs.push(soft.values()[row * num_classes..(row + 1) * num_classes].to_vec());
        }
    }
    Ok((probs, num_classes))
}
