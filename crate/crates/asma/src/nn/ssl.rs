//! Barlow Twins projector head, batch cross-correlation, and the combined
//! pretraining objective over the two encoders' triplet streams.

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, ParamTensors};
use super::ModelError;
use crate::ad::{batch_norm, AdResult, BnStats, Tensor};
use crate::util::rng_for;
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// Number of linear layers; layers before the last are followed by
    /// batch norm and relu. Depth 1 is a single linear map.
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BarlowLossConfig {
    /// Off-diagonal weight (lambda of the redundancy-reduction term).
    pub lambda: Real,
    /// Floor added to the denominator product of the correlation matrix.
    pub eps: Real,
    /// Batch-mean-center the embeddings before correlating. Disable to get
    /// the raw un-centered correlation.
    pub center: bool,
}

impl Default for BarlowLossConfig {
    fn default() -> Self {
        Self {
            lambda: 2e-4,
            eps: 1e-12,
            center: true,
        }
    }
}

/// MLP projector: `(linear -> batch_norm -> relu)^(depth-1) -> linear`.
pub struct Projector {
    pub cfg: ProjectorConfig,
    pub store: ParamStore,
}

impl Projector {
    pub fn new(cfg: ProjectorConfig, seed: u64) -> Result<Self, ModelError> {
        if cfg.out_dim < 2 {
            return Err(ModelError::BadCheckpoint(
                "projector out_dim must be at least 2".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = rng_for(&[seed, 0x9201]);
        let mut din = cfg.in_dim;
        for i in 0..cfg.depth {
            let dout = if i + 1 == cfg.depth { cfg.out_dim } else { cfg.hidden_dim };
            store.add_uniform(&format!("fc{i}.w"), vec![din, dout], din, &mut rng);
            store.add(&format!("fc{i}.b"), vec![0.0; dout], vec![dout], true);
            if i + 1 < cfg.depth {
                store.add(&format!("fc{i}.bn.gamma"), vec![1.0; dout], vec![dout], true);
                store.add(&format!("fc{i}.bn.beta"), vec![0.0; dout], vec![dout], true);
                store.add(
                    &format!("fc{i}.bn.running_mean"),
                    vec![0.0; dout],
                    vec![dout],
                    false,
                );
                store.add(
                    &format!("fc{i}.bn.running_var"),
                    vec![1.0; dout],
                    vec![dout],
                    false,
                );
            }
            din = dout;
        }
        Ok(Self { cfg, store })
    }

    pub fn from_store(cfg: ProjectorConfig, store: ParamStore) -> Self {
        Self { cfg, store }
    }

    /// Project pooled embeddings `N x in_dim` to `N x out_dim`.
    pub fn forward(
        &mut self,
        h: &Tensor,
        params: &ParamTensors,
        training: bool,
    ) -> Result<Tensor, ModelError> {
        let n = h.shape()[0];
        if n < 2 {
            return Err(ModelError::BatchTooSmall(n));
        }
        let mut z = h.clone();
        for i in 0..self.cfg.depth {
            z = z
                .matmul(params.get(&format!("fc{i}.w")))?
                .add(params.get(&format!("fc{i}.b")))?;
            if i + 1 < self.cfg.depth {
                let mut stats = BnStats {
                    mean: self
                        .store
                        .values(&format!("fc{i}.bn.running_mean"))
                        .to_vec(),
                    var: self.store.values(&format!("fc{i}.bn.running_var")).to_vec(),
                };
                z = batch_norm(
                    &z,
                    params.get(&format!("fc{i}.bn.gamma")),
                    params.get(&format!("fc{i}.bn.beta")),
                    &mut stats,
                    training,
                    0.1,
                    1e-5,
                )?;
                if training {
                    self.store
                        .set_values(&format!("fc{i}.bn.running_mean"), stats.mean);
                    self.store
                        .set_values(&format!("fc{i}.bn.running_var"), stats.var);
                }
                z = z.relu()?;
            }
        }
        Ok(z)
    }
}

/// Batch cross-correlation matrix `D x D` between two `N x D` projections.
///
/// Columns are batch-mean-centered first (unless `center` is false), then
/// `C_ij = Σ_b z_bi z'_bj / (sqrt(Σ_b z_bi²) sqrt(Σ_b z'_bj²) + eps)`.
pub fn cross_correlation(
    z: &Tensor,
    zp: &Tensor,
    eps: Real,
    center: bool,
) -> Result<Tensor, ModelError> {
    let (zs, ps) = (z.shape(), zp.shape());
    if zs.len() != 2 || zs != ps {
        return Err(ModelError::Ad(crate::ad::AdError::ShapeMismatch {
            op: "cross_correlation",
            lhs: zs.to_vec(),
            rhs: ps.to_vec(),
        }));
    }
    let (n, d) = (zs[0], zs[1]);
    if n < 2 {
        return Err(ModelError::BatchTooSmall(n));
    }
    let (zc, zpc) = if center {
        (
            z.sub(&z.mean(&[0])?)?,
            zp.sub(&zp.mean(&[0])?)?,
        )
    } else {
        (z.clone(), zp.clone())
    };
    let numer = zc.transpose(&[1, 0])?.matmul(&zpc)?; // D x D
    let zn = zc.mul(&zc)?.sum(&[0])?.sqrt()?.reshape(&[d, 1])?;
    let zpn = zpc.mul(&zpc)?.sum(&[0])?.sqrt()?.reshape(&[1, d])?;
    let denom = zn.matmul(&zpn)?.add(&Tensor::scalar(eps))?;
    Ok(numer.div(&denom)?)
}

/// `Σ_i (1 - C_ii)² + λ Σ_{i≠j} C_ij²`.
pub fn barlow_loss(c: &Tensor, lambda: Real) -> AdResult<Tensor> {
    let s = c.shape();
    assert!(s.len() == 2 && s[0] == s[1], "barlow_loss needs a square matrix");
    let d = s[0];
    let mut eye = vec![0.0 as Real; d * d];
    let mut off = vec![1.0 as Real; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
        off[i * d + i] = 0.0;
    }
    let eye = Tensor::from_vec(eye, vec![d, d]);
    let off = Tensor::from_vec(off, vec![d, d]);

    let diag_resid = eye.sub(&c.mul(&eye)?)?;
    let diag_term = diag_resid.mul(&diag_resid)?.sum(&[0, 1])?;
    let off_part = c.mul(&off)?;
    let off_term = off_part.mul(&off_part)?.sum(&[0, 1])?.scale(lambda)?;
    diag_term.add(&off_term)
}

/// Per-term values of the combined pretraining objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainLossParts {
    pub l1_theta: Real,
    pub l2_theta: Real,
    pub l1_phi: Real,
    pub l2_phi: Real,
    pub total: Real,
}

/// Combined objective: for each encoder, the Barlow loss between the anchor
/// projection and each masked-stream projection, summed over both encoders.
#[allow(clippy::too_many_arguments)]
pub fn asma_pretrain_loss(
    z_theta: &Tensor,
    z_j_theta: &Tensor,
    z_m_theta: &Tensor,
    z_phi: &Tensor,
    z_j_phi: &Tensor,
    z_m_phi: &Tensor,
    cfg: &BarlowLossConfig,
) -> Result<(Tensor, PretrainLossParts), ModelError> {
    let l1_t = barlow_loss(
        &cross_correlation(z_theta, z_j_theta, cfg.eps, cfg.center)?,
        cfg.lambda,
    )?;
    let l2_t = barlow_loss(
        &cross_correlation(z_theta, z_m_theta, cfg.eps, cfg.center)?,
        cfg.lambda,
    )?;
    let l1_p = barlow_loss(
        &cross_correlation(z_phi, z_j_phi, cfg.eps, cfg.center)?,
        cfg.lambda,
    )?;
    let l2_p = barlow_loss(
        &cross_correlation(z_phi, z_m_phi, cfg.eps, cfg.center)?,
        cfg.lambda,
    )?;
    let total = l1_t.add(&l2_t)?.add(&l1_p.add(&l2_p)?)?;
    let parts = PretrainLossParts {
        l1_theta: l1_t.item(),
        l2_theta: l2_t.item(),
        l1_phi: l1_p.item(),
        l2_phi: l2_p.item(),
        total: total.item(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng as _;

    #[test]
    fn identity_correlation_on_identical_inputs() {
        let mut rng = rng_for(&[60]);
        let (n, d) = (8, 4);
        let zv: Vec<Real> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = Tensor::from_vec(zv, vec![n, d]);
        let c = cross_correlation(&z, &z, 0.0, true).unwrap();
        for i in 0..d {
            assert!((c.values()[i * d + i] - 1.0).abs() < 1e-6, "diag {i}");
        }
        for v in c.values() {
            assert!(v.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn degenerate_centering_gives_zero_matrix() {
        // z' columns become zero after centering -> C = 0
        let z = Tensor::from_vec(vec![1.0, -1.0], vec![2, 1]);
        let zp = Tensor::from_vec(vec![1.0, 1.0], vec![2, 1]);
        let c = cross_correlation(&z, &zp, 1e-12, true).unwrap();
        assert!(c.values()[0].abs() < 1e-9);
    }

    #[test]
    fn hand_computed_two_by_two_case() {
        // z = [[1,0],[-1,2]], z' = [[2,1],[0,-1]]
        // centered: zc = [[1,-1],[-1,1]], z'c = [[1,1],[-1,-1]]
        // all column norms sqrt(2); C = [[1,1],[-1,-1]]
        let z = Tensor::from_vec(vec![1.0, 0.0, -1.0, 2.0], vec![2, 2]);
        let zp = Tensor::from_vec(vec![2.0, 1.0, 0.0, -1.0], vec![2, 2]);
        let c = cross_correlation(&z, &zp, 0.0, true).unwrap();
        let expect = [1.0, 1.0, -1.0, -1.0];
        for (got, want) in c.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn correlation_invariant_to_positive_column_rescaling() {
        let mut rng = rng_for(&[61]);
        let (n, d) = (6, 3);
        let zv: Vec<Real> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let zpv: Vec<Real> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let scales = [2.0, 0.5, 7.0];
        let z_scaled: Vec<Real> = zv
            .iter()
            .enumerate()
            .map(|(i, v)| v * scales[i % d])
            .collect();
        let a = cross_correlation(
            &Tensor::from_vec(zv, vec![n, d]),
            &Tensor::from_vec(zpv.clone(), vec![n, d]),
            0.0,
            true,
        )
        .unwrap();
        let b = cross_correlation(
            &Tensor::from_vec(z_scaled, vec![n, d]),
            &Tensor::from_vec(zpv, vec![n, d]),
            0.0,
            true,
        )
        .unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_too_small_is_rejected() {
        let z = Tensor::from_vec(vec![1.0, 2.0], vec![1, 2]);
        assert!(matches!(
            cross_correlation(&z, &z, 0.0, true),
            Err(ModelError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn barlow_loss_fixed_points() {
        let d = 3;
        let mut eye = vec![0.0 as Real; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let at_identity = barlow_loss(&Tensor::from_vec(eye, vec![d, d]), 2e-4).unwrap();
        assert_eq!(at_identity.item(), 0.0);

        let at_zero = barlow_loss(&Tensor::zeros(vec![d, d]), 2e-4).unwrap();
        assert_eq!(at_zero.item(), d as Real);

        // all-ones: diagonal exact, off-diagonal 6 entries at lambda=2e-4
        let ones = Tensor::from_vec(vec![1.0; d * d], vec![d, d]);
        let at_ones = barlow_loss(&ones, 2e-4).unwrap();
        assert!((at_ones.item() - 1.2e-3).abs() < 1e-12);
    }

    #[test]
    fn barlow_loss_is_nonnegative() {
        let mut rng = rng_for(&[62]);
        for _ in 0..50 {
            let d = 4;
            let cv: Vec<Real> = (0..d * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let l = barlow_loss(&Tensor::from_vec(cv, vec![d, d]), 2e-4).unwrap();
            assert!(l.item() >= 0.0);
        }
    }

    #[test]
    fn projector_depth1_is_linear_and_paper_dims_hold() {
        let cfg = ProjectorConfig {
            in_dim: 3,
            hidden_dim: 5,
            out_dim: 4,
            depth: 1,
        };
        let mut proj = Projector::new(cfg, 1).unwrap();
        let h = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], vec![2, 3]);
        let params = proj.store.constants();
        let z = proj.forward(&h, &params, false).unwrap();
        // row i of output = row i of weights (+ zero bias)
        let w = proj.store.values("fc0.w").to_vec();
        for j in 0..4 {
            assert_eq!(z.values()[j], w[j]);
            assert_eq!(z.values()[4 + j], w[4 + j]);
        }

        // paper-scale head: 256 -> 6144
        let paper = Projector::new(
            ProjectorConfig {
                in_dim: 256,
                hidden_dim: 6144,
                out_dim: 6144,
                depth: 3,
            },
            2,
        )
        .unwrap();
        assert_eq!(paper.cfg.in_dim, 256);
        assert_eq!(paper.cfg.out_dim, 6144);
    }

    #[test]
    fn projector_rejects_batch_of_one() {
        let cfg = ProjectorConfig {
            in_dim: 3,
            hidden_dim: 4,
            out_dim: 4,
            depth: 2,
        };
        let mut proj = Projector::new(cfg, 1).unwrap();
        let h = Tensor::from_vec(vec![1.0, 2.0, 3.0], vec![1, 3]);
        let params = proj.store.constants();
        assert!(matches!(
            proj.forward(&h, &params, true),
            Err(ModelError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn projector_gradient_check() {
        let cfg = ProjectorConfig {
            in_dim: 3,
            hidden_dim: 4,
            out_dim: 3,
            depth: 3,
        };
        let proj = Projector::new(cfg.clone(), 5).unwrap();
        let mut rng = rng_for(&[63]);
        let hv: Vec<Real> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<Real> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for target in ["fc0.w", "fc1.bn.gamma", "fc2.w", "fc0.b"] {
            let base = proj.store.clone();
            let cfg = cfg.clone();
            let w = w.clone();
            let mut f = move |inp: &[Tensor]| {
                let mut p = Projector::from_store(cfg.clone(), base.clone());
                let mut params = p.store.constants();
                params.insert(target, inp[1].clone());
                let z = p
                    .forward(&inp[0], &params, true)
                    .map_err(|_| crate::ad::AdError::NoTape)?;
                let wt = Tensor::from_vec(w.clone(), z.shape().to_vec());
                z.mul(&wt)?.sum(&[0, 1])
            };
            let entry = proj.store.entry(target);
            crate::ad::check_gradient(
                &mut f,
                &[
                    (hv.clone(), vec![4, 3]),
                    (entry.values.clone(), entry.shape.clone()),
                ],
                1e-4,
                1e-4,
            )
            .unwrap_or_else(|e| panic!("{target}: {e}"));
        }
    }

    #[test]
    fn pretrain_loss_adds_up_and_swaps_cleanly() {
        let mut rng = rng_for(&[64]);
        let (n, d) = (6, 4);
        let mk = |rng: &mut crate::Rng| {
            let v: Vec<Real> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(v, vec![n, d])
        };
        let (za, zj, zm) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (wa, wj, wm) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let cfg = BarlowLossConfig::default();
        let (total, parts) =
            asma_pretrain_loss(&za, &zj, &zm, &wa, &wj, &wm, &cfg).unwrap();
        let sum = parts.l1_theta + parts.l2_theta + parts.l1_phi + parts.l2_phi;
        assert!((total.item() - sum).abs() < 1e-9);
        assert!((parts.total - sum).abs() < 1e-9);

        // swapping the theta and phi stream sets permutes the four term
        // values but keeps the multiset
        let (_, swapped) = asma_pretrain_loss(&wa, &wj, &wm, &za, &zj, &zm, &cfg).unwrap();
        let mut a = [parts.l1_theta, parts.l2_theta, parts.l1_phi, parts.l2_phi];
        let mut b = [
            swapped.l1_theta,
            swapped.l2_theta,
            swapped.l1_phi,
            swapped.l2_phi,
        ];
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_full_rank_inputs_leave_only_off_diagonal_energy() {
        let mut rng = rng_for(&[65]);
        let (n, d) = (8, 3);
        let v: Vec<Real> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = Tensor::from_vec(v, vec![n, d]);
        let cfg = BarlowLossConfig::default();
        let (total, parts) = asma_pretrain_loss(&z, &z, &z, &z, &z, &z, &cfg).unwrap();
        // diagonals are exactly 1, so the loss is pure lambda-weighted
        // off-diagonal energy: small
        assert!(total.item() < 1e-2, "loss {}", total.item());
        assert!(parts.l1_theta < 2.5e-3);
    }

    #[test]
    fn pretrain_loss_gradient_through_projector() {
        let cfg = ProjectorConfig {
            in_dim: 3,
            hidden_dim: 4,
            out_dim: 4,
            depth: 2,
        };
        let proj = Projector::new(cfg.clone(), 8).unwrap();
        let mut rng = rng_for(&[66]);
        let n = 4;
        let mk = |rng: &mut crate::Rng| -> Vec<Real> {
            (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let streams: Vec<Vec<Real>> = (0..6).map(|_| mk(&mut rng)).collect();
        let base = proj.store.clone();
        let pcfg = cfg.clone();
        let mut f = move |inp: &[Tensor]| {
            let mut p = Projector::from_store(pcfg.clone(), base.clone());
            let mut params = p.store.constants();
            params.insert("fc0.w", inp[6].clone());
            let zs: Vec<Tensor> = (0..6)
                .map(|i| p.forward(&inp[i], &params, true).unwrap())
                .collect();
            let (total, _) = asma_pretrain_loss(
                &zs[0],
                &zs[1],
                &zs[2],
                &zs[3],
                &zs[4],
                &zs[5],
                &BarlowLossConfig::default(),
            )
            .map_err(|_| crate::ad::AdError::NoTape)?;
            Ok(total)
        };
        let entry = proj.store.entry("fc0.w");
        let mut inputs: Vec<(Vec<Real>, Vec<usize>)> = streams
            .into_iter()
            .map(|v| (v, vec![n, 3]))
            .collect();
        inputs.push((entry.values.clone(), entry.shape.clone()));
        crate::ad::check_gradient(&mut f, &inputs, 1e-4, 1e-4).unwrap();
    }
}
