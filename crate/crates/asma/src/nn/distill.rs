//! Teacher-to-student knowledge transfer: temperature-scaled softening, the
//! KL objective over softened distributions, and the feature-level cosine
//! alternative.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::ad::{AdResult, Tensor};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    LogitKl,
    FeatureCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    LinearProbed,
    FineTuned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Softening temperature applied to the teacher logits.
    pub tau: Real,
    /// Temperature for the student side; defaults to `tau` when absent
    /// (set it to 1 to soften only the teacher).
    pub student_tau: Option<Real>,
    pub mode: DistillMode,
    pub teacher_kind: TeacherKind,
    /// Multiply the KL by tau² so gradient magnitudes stay comparable
    /// across temperatures.
    pub scale_by_tau_sq: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 8.0,
            student_tau: None,
            mode: DistillMode::LogitKl,
            teacher_kind: TeacherKind::LinearProbed,
            scale_by_tau_sq: true,
        }
    }
}

/// Row-wise softmax of `logits / tau`.
pub fn soften(logits: &Tensor, tau: Real) -> AdResult<Tensor> {
    assert!(tau > 0.0, "temperature must be positive");
    logits.scale(1.0 / tau)?.softmax(1)
}

/// Mean over the batch of `KL(teacher ‖ student)` with both sides softened.
///
/// The teacher is treated as a constant: pass plain (untracked) logits, or
/// tracked ones — either way no gradient flows into the teacher term, which
/// is computed outside the tape.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    cfg: &DistillConfig,
) -> AdResult<Tensor> {
    let (ss, ts) = (student_logits.shape(), teacher_logits.shape());
    if ss != ts || ss.len() != 2 {
        return Err(crate::ad::AdError::ShapeMismatch {
            op: "kd_loss",
            lhs: ss.to_vec(),
            rhs: ts.to_vec(),
        });
    }
    let (n, c) = (ss[0], ss[1]);
    let student_tau = cfg.student_tau.unwrap_or(cfg.tau);

    // teacher probabilities and entropy term, computed on plain values
    let p_t = soften_values(teacher_logits.values(), n, c, cfg.tau);
    let teacher_term: Real = p_t
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<Real>()
        / n as Real;

    let p_t = Tensor::from_vec(p_t, vec![n, c]);
    let log_s = soften(student_logits, student_tau)?.log()?;
    // KL = E_b[ Σ p_T ln p_T - Σ p_T ln p_S ]
    let cross: Tensor = p_t.mul(&log_s)?.sum(&[0, 1])?.scale(1.0 / n as Real)?;
    let kl = cross.neg()?.add(&Tensor::scalar(teacher_term))?;
    if cfg.scale_by_tau_sq {
        kl.scale(cfg.tau * cfg.tau)
    } else {
        Ok(kl)
    }
}

fn soften_values(logits: &[Real], n: usize, c: usize, tau: Real) -> Vec<Real> {
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        let row = &logits[b * c..(b + 1) * c];
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut z = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = ((x - max) / tau).exp();
            out[b * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[b * c + j] /= z;
        }
    }
    out
}

/// Feature-level distillation: `1 - mean_b cos(h_s[b], proj(h_t[b]))` with
/// both sides L2-normalized. The projection (`proj_w`: `D x d_s`, `proj_b`:
/// `d_s`) maps teacher features onto the student dimension and trains with
/// the student.
pub fn feature_distill_loss(
    h_s: &Tensor,
    h_t: &Tensor,
    proj_w: &Tensor,
    proj_b: &Tensor,
) -> Result<Tensor, ModelError> {
    let n = h_s.shape()[0];
    let projected = h_t.matmul(proj_w)?.add(proj_b)?;
    let ns = row_normalize(h_s)?;
    let np = row_normalize(&projected)?;
    // cos per row, mean over batch
    let cos = ns.mul(&np)?.sum(&[1])?.mean(&[0])?;
    let _ = n;
    Ok(Tensor::scalar(1.0).sub(&cos)?)
}

/// Rows scaled to unit L2 norm; errors on a row with norm below 1e-12.
fn row_normalize(x: &Tensor) -> Result<Tensor, ModelError> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let sumsq = x.mul(x)?.sum(&[1])?;
    if sumsq.values().iter().any(|&s| s < 1e-24) {
        return Err(ModelError::ZeroVector);
    }
    let norms = sumsq.sqrt()?.reshape(&[n, 1])?;
    let ones = Tensor::from_vec(vec![1.0; d], vec![1, d]);
    let norm_mat = norms.matmul(&ones)?;
    Ok(x.div(&norm_mat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng as _;

    fn cfg(tau: Real) -> DistillConfig {
        DistillConfig {
            tau,
            scale_by_tau_sq: false,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn soften_limits() {
        let logits = Tensor::from_vec(vec![3.0, -1.0, 0.5, 2.0, 2.0, 2.0], vec![2, 3]);
        // huge tau: rows approach uniform
        let p = soften(&logits, 1e6).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-4);
        }
        // tau 1: ordinary softmax
        let p1 = soften(&logits, 1.0).unwrap();
        let direct = logits.softmax(1).unwrap();
        for (a, b) in p1.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soften_hand_case() {
        // logits [2,0], tau 2 -> softmax([1,0]) = [e/(e+1), 1/(e+1)]
        let logits = Tensor::from_vec(vec![2.0, 0.0], vec![1, 2]);
        let p = soften(&logits, 2.0).unwrap();
        let e = std::f64::consts::E as Real;
        assert!((p.values()[0] - e / (e + 1.0)).abs() < 1e-9);
        assert!((p.values()[1] - 1.0 / (e + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn soften_preserves_argmax() {
        let mut rng = rng_for(&[80]);
        for _ in 0..100 {
            let c = 6;
            let row: Vec<Real> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for tau in [0.5, 1.0, 2.0, 8.0, 32.0] {
                let p = soften(&Tensor::from_vec(row.clone(), vec![1, c]), tau).unwrap();
                let soft_argmax = p
                    .values()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(soft_argmax, argmax, "tau {tau}");
            }
        }
    }

    #[test]
    fn kd_loss_zero_on_self() {
        let logits = Tensor::from_vec(vec![1.0, -2.0, 0.3, 0.0, 4.0, -1.0], vec![2, 3]);
        let l = kd_loss(&logits, &logits, &cfg(4.0)).unwrap();
        assert!(l.item().abs() < 1e-9);
    }

    #[test]
    fn kd_loss_nonnegative_on_random_pairs() {
        let mut rng = rng_for(&[81]);
        for _ in 0..1_000 {
            let (n, c) = (2, 4);
            let s: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let l = kd_loss(
                &Tensor::from_vec(s, vec![n, c]),
                &Tensor::from_vec(t, vec![n, c]),
                &cfg(2.0),
            )
            .unwrap();
            assert!(l.item() >= -1e-12, "negative KL {}", l.item());
        }
    }

    #[test]
    fn kd_loss_two_class_hand_case() {
        // teacher [2,0], student [0,2], tau 1:
        // KL = 2 tanh(1)
        let t = Tensor::from_vec(vec![2.0, 0.0], vec![1, 2]);
        let s = Tensor::from_vec(vec![0.0, 2.0], vec![1, 2]);
        let l = kd_loss(&s, &t, &cfg(1.0)).unwrap();
        let expect = 2.0 * (1.0f64.tanh()) as Real;
        assert!((l.item() - expect).abs() < 1e-9, "{} vs {expect}", l.item());
    }

    #[test]
    fn kd_loss_invariant_to_teacher_logit_shift() {
        let mut rng = rng_for(&[82]);
        let (n, c) = (3, 5);
        let s: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t_shift: Vec<Real> = t.iter().map(|x| x + 7.5).collect();
        let a = kd_loss(
            &Tensor::from_vec(s.clone(), vec![n, c]),
            &Tensor::from_vec(t, vec![n, c]),
            &cfg(3.0),
        )
        .unwrap();
        let b = kd_loss(
            &Tensor::from_vec(s, vec![n, c]),
            &Tensor::from_vec(t_shift, vec![n, c]),
            &cfg(3.0),
        )
        .unwrap();
        assert!((a.item() - b.item()).abs() < 1e-9);
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut rng = rng_for(&[83]);
        let (n, c) = (3, 4);
        let t: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s: Vec<Real> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for scale in [false, true] {
            let t = t.clone();
            let mut f = move |inp: &[Tensor]| {
                let teacher = Tensor::from_vec(t.clone(), vec![n, c]);
                kd_loss(
                    &inp[0],
                    &teacher,
                    &DistillConfig {
                        tau: 4.0,
                        scale_by_tau_sq: scale,
                        ..DistillConfig::default()
                    },
                )
            };
            crate::ad::check_gradient(&mut f, &[(s.clone(), vec![n, c])], 1e-4, 1e-4)
                .unwrap_or_else(|e| panic!("scale={scale}: {e}"));
        }
    }

    #[test]
    fn tau_sq_scaling_keeps_gradient_magnitude_stable() {
        // with the tau² factor, d(loss)/d(student logits) stays O(1) as tau
        // grows; compare gradient norms across tau on fixed logits
        let (n, c) = (2, 4);
        let t: Vec<Real> = vec![2.0, -1.0, 0.5, 0.0, -0.5, 1.5, 0.0, 1.0];
        let s: Vec<Real> = vec![0.1, 0.4, -0.2, 0.9, 1.0, -1.0, 0.3, 0.2];
        let grad_norm = |tau: Real| -> Real {
            let tape = crate::ad::Tape::new();
            let sl = tape.leaf(s.clone(), vec![n, c]);
            let tl = Tensor::from_vec(t.clone(), vec![n, c]);
            let l = kd_loss(
                &sl,
                &tl,
                &DistillConfig {
                    tau,
                    scale_by_tau_sq: true,
                    ..DistillConfig::default()
                },
            )
            .unwrap();
            l.backward().unwrap();
            sl.grad()
                .unwrap()
                .iter()
                .map(|g| g * g)
                .sum::<Real>()
                .sqrt()
        };
        let norms: Vec<Real> = [2.0, 8.0, 32.0].iter().map(|&t| grad_norm(t)).collect();
        for pair in norms.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!(
                (0.5..=2.0).contains(&ratio),
                "gradient norms {norms:?} not within 2x"
            );
        }
    }

    #[test]
    fn feature_loss_fixed_points() {
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let b = Tensor::from_vec(vec![0.0, 0.0], vec![2]);

        // perfect alignment
        let h = Tensor::from_vec(vec![0.6, 0.8, -1.0, 0.0], vec![2, 2]);
        let l = feature_distill_loss(&h, &h, &w, &b).unwrap();
        assert!(l.item().abs() < 1e-9);

        // antiparallel
        let hs = Tensor::from_vec(vec![1.0, 0.0], vec![1, 2]);
        let ht = Tensor::from_vec(vec![-2.0, 0.0], vec![1, 2]);
        let l = feature_distill_loss(&hs, &ht, &w, &b).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-9);

        // orthogonal
        let ht = Tensor::from_vec(vec![0.0, 3.0], vec![1, 2]);
        let l = feature_distill_loss(&hs, &ht, &w, &b).unwrap();
        assert!((l.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn feature_loss_rejects_zero_vectors() {
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let b = Tensor::from_vec(vec![0.0, 0.0], vec![2]);
        let hs = Tensor::zeros(vec![1, 2]);
        let ht = Tensor::from_vec(vec![1.0, 1.0], vec![1, 2]);
        assert!(matches!(
            feature_distill_loss(&hs, &ht, &w, &b),
            Err(ModelError::ZeroVector)
        ));
    }

    #[test]
    fn feature_loss_gradient_check() {
        let mut rng = rng_for(&[84]);
        let (n, dt, ds) = (3, 4, 2);
        let hs: Vec<Real> = (0..n * ds).map(|_| rng.gen_range(0.5..2.0)).collect();
        let ht: Vec<Real> = (0..n * dt).map(|_| rng.gen_range(0.5..2.0)).collect();
        let wv: Vec<Real> = (0..dt * ds).map(|_| rng.gen_range(0.2..1.0)).collect();
        let bv: Vec<Real> = (0..ds).map(|_| rng.gen_range(0.1..0.5)).collect();
        let mut f = move |inp: &[Tensor]| {
            feature_distill_loss(&inp[0], &inp[1], &inp[2], &inp[3])
                .map_err(|_| crate::ad::AdError::NoTape)
        };
        crate::ad::check_gradient(
            &mut f,
            &[
                (hs, vec![n, ds]),
                (ht, vec![n, dt]),
                (wv, vec![dt, ds]),
                (bv, vec![ds]),
            ],
            1e-4,
            1e-4,
        )
        .unwrap();
    }
}
