//! Scratch benchmark: desk pretrain + probe timing and learning signal.
use asma::train::{self, Stage};
use std::time::Instant;

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_u(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut exp = train::ExperimentConfig::desk();
    exp.seed = seed;
    exp.data.synth.per_class = env_u("PC", exp.data.synth.per_class);
    exp.data.synth.frames = env_u("FRAMES", exp.data.synth.frames);
    exp.data.synth.jitter = env_f("JITTER", exp.data.synth.jitter);
    exp.stages.pretrain.epochs = env_u("PRE_EPOCHS", exp.stages.pretrain.epochs);
    exp.stages.pretrain.lr = env_f("PRE_LR", exp.stages.pretrain.lr);
    exp.stages.probe.epochs = env_u("PROBE_EPOCHS", exp.stages.probe.epochs);
    exp.stages.probe.lr = env_f("PROBE_LR", exp.stages.probe.lr);
    exp.stages.probe.weight_decay = env_f("PROBE_WD", exp.stages.probe.weight_decay);
    exp.model.hidden_channels = env_u("HIDDEN", exp.model.hidden_channels);
    exp.model.embed_dim = env_u("EMBED", exp.model.embed_dim);
    exp.model.projector.in_dim = exp.model.embed_dim;
    exp.masking.n_joints = env_u("NJ", exp.masking.n_joints);
    exp.masking.k_frames = env_u("KF", exp.masking.k_frames);

    let cfg = exp.resolve(Stage::Pretrain);
    let ds = train::load_dataset(&cfg).unwrap();
    let t0 = Instant::now();
    let mut out = train::pretrain(&cfg, &ds, None, false).unwrap();
    let pt = t0.elapsed();
    println!(
        "pretrain: {:.1}s; loss first={:.1} last={:.1} ratio={:.3}",
        pt.as_secs_f64(),
        out.epoch_losses[0],
        out.epoch_losses.last().unwrap(),
        out.epoch_losses.last().unwrap() / out.epoch_losses[0]
    );
    let pcfg = exp.resolve(Stage::Probe);
    let t1 = Instant::now();
    let probe = train::linear_probe(&pcfg, &ds, &mut out.models, None).unwrap();
    println!(
        "probe: {:.1}s; eval={:.3} train={:.3}",
        t1.elapsed().as_secs_f64(),
        probe.eval_acc,
        probe.train_acc
    );
    let se_t = train::single_encoder_probe(&pcfg, &ds, &mut out.models.enc_theta).unwrap();
    let se_p = train::single_encoder_probe(&pcfg, &ds, &mut out.models.enc_phi).unwrap();
    println!("single-encoder probes: theta={se_t:.3} phi={se_p:.3}");
    let mut random = train::pretrain::init_models(&cfg, &ds).unwrap();
    let probe_r = train::linear_probe(&pcfg, &ds, &mut random, None).unwrap();
    println!("random probe: eval={:.3} train={:.3}", probe_r.eval_acc, probe_r.train_acc);
}
