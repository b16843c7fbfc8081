//! Bi-directional multi-head cross-attention over the two encoders' token
//! sequences, plus the linear classification head and cross-entropy loss.

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, ParamTensors};
use super::ModelError;
use crate::ad::{AdResult, Tensor};
use crate::util::rng_for;
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub num_heads: usize,
    pub model_dim: usize,
    pub num_classes: usize,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(ModelError::BadCheckpoint(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Alignment module parameters: Q/K/V/output projections per direction
/// (bias-free) and the classifier weight and bias.
pub struct AlignHead {
    pub cfg: AlignConfig,
    pub store: ParamStore,
}

const DIRECTIONS: [&str; 2] = ["t2p", "p2t"];

impl AlignHead {
    pub fn new(cfg: AlignConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut store = ParamStore::new();
        let mut rng = rng_for(&[seed, 0xA116]);
        for dir in DIRECTIONS {
            for m in ["wq", "wk", "wv", "wo"] {
                store.add_uniform(&format!("{dir}.{m}"), vec![d, d], d, &mut rng);
            }
        }
        store.add_uniform("cls.w", vec![d, cfg.num_classes], d, &mut rng);
        store.add(
            "cls.b",
            vec![0.0; cfg.num_classes],
            vec![cfg.num_classes],
            true,
        );
        Ok(Self { cfg, store })
    }

    pub fn from_store(cfg: AlignConfig, store: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg, store })
    }

    /// Fuse the two token sequences (`N x L x D` each) into one pooled
    /// embedding `N x D`: each encoder attends to the other, the two
    /// attended sequences are summed, then mean-pooled over tokens.
    pub fn align(
        &self,
        h_theta: &Tensor,
        h_phi: &Tensor,
        params: &ParamTensors,
    ) -> AdResult<Tensor> {
        bidirectional_align(h_theta, h_phi, params, self.cfg.num_heads)
    }

    pub fn classify(&self, pooled: &Tensor, params: &ParamTensors) -> AdResult<Tensor> {
        classify(pooled, params)
    }

    pub fn count_params(&self) -> usize {
        self.store.num_learnable_scalars()
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` over `N x L x d_k` inputs; the softmax is
/// over the key axis.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> AdResult<Tensor> {
    let d_k = *q.shape().last().expect("rank-3 input") as Real;
    let scores = q
        .batched_matmul(&k.transpose(&[0, 2, 1])?)?
        .scale(1.0 / d_k.sqrt())?;
    scores.softmax(2)?.batched_matmul(v)
}

/// Linear map over the last axis of a rank-3 tensor: `(N,L,D) x (D,E)`.
fn linear3(x: &Tensor, w: &Tensor) -> AdResult<Tensor> {
    let s = x.shape().to_vec();
    let e = w.shape()[1];
    x.reshape(&[s[0] * s[1], s[2]])?
        .matmul(w)?
        .reshape(&[s[0], s[1], e])
}

/// One multi-head cross-attention flow: `query_src` attends to `kv_src`.
fn mha(
    query_src: &Tensor,
    kv_src: &Tensor,
    params: &ParamTensors,
    dir: &str,
    num_heads: usize,
) -> AdResult<Tensor> {
    let q = linear3(query_src, params.get(&format!("{dir}.wq")))?;
    let k = linear3(kv_src, params.get(&format!("{dir}.wk")))?;
    let v = linear3(kv_src, params.get(&format!("{dir}.wv")))?;
    let d = q.shape()[2];
    let head_dim = d / num_heads;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let out = scaled_dot_attention(
            &q.slice(2, lo, hi)?,
            &k.slice(2, lo, hi)?,
            &v.slice(2, lo, hi)?,
        )?;
        heads.push(out);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let concat = Tensor::concat(&refs, 2)?;
    linear3(&concat, params.get(&format!("{dir}.wo")))
}

/// Bi-directional fusion of the encoders' token sequences; see
/// [`AlignHead::align`].
pub fn bidirectional_align(
    h_theta: &Tensor,
    h_phi: &Tensor,
    params: &ParamTensors,
    num_heads: usize,
) -> AdResult<Tensor> {
    if h_theta.shape() != h_phi.shape() {
        return Err(crate::ad::AdError::ShapeMismatch {
            op: "bidirectional_align",
            lhs: h_theta.shape().to_vec(),
            rhs: h_phi.shape().to_vec(),
        });
    }
    let a_theta = mha(h_theta, h_phi, params, "t2p", num_heads)?;
    let a_phi = mha(h_phi, h_theta, params, "p2t", num_heads)?;
    a_theta.add(&a_phi)?.mean(&[1])
}

/// Linear classifier logits `W_cls · h + b`.
pub fn classify(pooled: &Tensor, params: &ParamTensors) -> AdResult<Tensor> {
    pooled.matmul(params.get("cls.w"))?.add(params.get("cls.b"))
}

/// Mean cross-entropy of `N x C` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> AdResult<Tensor> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(n, labels.len(), "one label per row");
    let mut onehot = vec![0.0 as Real; n * c];
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < c, "label {l} out of range for {c} classes");
        onehot[i * c + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, vec![n, c]);
    // -mean over rows of log softmax at the target entry
    logits
        .softmax(1)?
        .log()?
        .mul(&onehot)?
        .sum(&[1])?
        .mean(&[0])?
        .neg()
}

/// Top-1 accuracy of logits (or probabilities) against labels.
pub fn accuracy(logits: &[Real], num_classes: usize, labels: &[usize]) -> Real {
    let n = labels.len();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = &logits[i * num_classes..(i + 1) * num_classes];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            best == l
        })
        .count();
    correct as Real / n as Real
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng as _;

    #[test]
    fn single_token_attention_returns_value_row() {
        let q = Tensor::from_vec(vec![0.7, -0.3], vec![1, 1, 2]);
        let k = Tensor::from_vec(vec![1.0, 2.0], vec![1, 1, 2]);
        let v = Tensor::from_vec(vec![5.0, -4.0], vec![1, 1, 2]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.values(), &[5.0, -4.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_vec(vec![0.9, 0.1], vec![1, 2, 1]);
        let k = Tensor::from_vec(vec![0.5, 0.5], vec![1, 2, 1]);
        let v = Tensor::from_vec(vec![2.0, 4.0], vec![1, 2, 1]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for o in out.values() {
            assert!((o - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_attention_hand_case() {
        // L=2, d_k=1: Q=[[1],[0]], K=[[1],[0]], V=[[2],[4]]
        // row 0 weights softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        let q = Tensor::from_vec(vec![1.0, 0.0], vec![1, 2, 1]);
        let k = Tensor::from_vec(vec![1.0, 0.0], vec![1, 2, 1]);
        let v = Tensor::from_vec(vec![2.0, 4.0], vec![1, 2, 1]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let e = std::f64::consts::E as Real;
        let w0 = e / (e + 1.0);
        let expect0 = w0 * 2.0 + (1.0 - w0) * 4.0;
        assert!((out.values()[0] - expect0).abs() < 1e-9);
        assert!((out.values()[1] - 3.0).abs() < 1e-9); // uniform weights
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = rng_for(&[70]);
        let (n, l, d) = (2, 5, 3);
        let mk = |rng: &mut crate::Rng| {
            let v: Vec<Real> = (0..n * l * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::from_vec(v, vec![n, l, d])
        };
        let (q, k) = (mk(&mut rng), mk(&mut rng));
        let weights = q
            .batched_matmul(&k.transpose(&[0, 2, 1]).unwrap())
            .unwrap()
            .scale(1.0 / (d as Real).sqrt())
            .unwrap()
            .softmax(2)
            .unwrap();
        for row in 0..n * l {
            let s: Real = weights.values()[row * l..(row + 1) * l].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    fn head(cfg: &AlignConfig, seed: u64) -> AlignHead {
        AlignHead::new(cfg.clone(), seed).unwrap()
    }

    #[test]
    fn param_count_formula_holds() {
        let cfg = AlignConfig {
            num_heads: 4,
            model_dim: 256,
            num_classes: 60,
        };
        let h = head(&cfg, 1);
        let d = cfg.model_dim;
        let expect = 2 * 4 * d * d + d * cfg.num_classes + cfg.num_classes;
        assert_eq!(h.count_params(), expect);
    }

    #[test]
    fn identical_inputs_with_identity_projections_double() {
        let cfg = AlignConfig {
            num_heads: 2,
            model_dim: 4,
            num_classes: 3,
        };
        let mut h = head(&cfg, 2);
        // identity Q/K/V/O in both directions
        let mut eye = vec![0.0 as Real; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        for dir in ["t2p", "p2t"] {
            for m in ["wq", "wk", "wv", "wo"] {
                h.store.set_values(&format!("{dir}.{m}"), eye.clone());
            }
        }
        let mut rng = rng_for(&[71]);
        let v: Vec<Real> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = Tensor::from_vec(v.clone(), vec![2, 3, 4]);
        let params = h.store.constants();
        let pooled = h.align(&tokens, &tokens, &params).unwrap();

        // both directions produce the same attended sequence, so the fused
        // output is twice one direction's pooled tokens
        let one = mha(&tokens, &tokens, &params, "t2p", 2)
            .unwrap()
            .mean(&[1])
            .unwrap();
        for (a, b) in pooled.values().iter().zip(one.values()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_phi_contributes_nothing_with_biasfree_projections() {
        let cfg = AlignConfig {
            num_heads: 2,
            model_dim: 4,
            num_classes: 3,
        };
        let h = head(&cfg, 3);
        let mut rng = rng_for(&[72]);
        let v: Vec<Real> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h_theta = Tensor::from_vec(v, vec![2, 3, 4]);
        let h_phi = Tensor::zeros(vec![2, 3, 4]);
        let params = h.store.constants();
        // theta attends to zero keys/values: V rows are zero, so the
        // attended output (and its output projection) is exactly zero
        let branch = mha(&h_theta, &h_phi, &params, "t2p", 2).unwrap();
        assert!(branch.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn align_is_batch_permutation_equivariant() {
        let cfg = AlignConfig {
            num_heads: 2,
            model_dim: 4,
            num_classes: 3,
        };
        let h = head(&cfg, 4);
        let mut rng = rng_for(&[73]);
        let (n, l, d) = (3, 2, 4);
        let ta: Vec<Real> = (0..n * l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tb: Vec<Real> = (0..n * l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = h.store.constants();
        let out = h
            .align(
                &Tensor::from_vec(ta.clone(), vec![n, l, d]),
                &Tensor::from_vec(tb.clone(), vec![n, l, d]),
                &params,
            )
            .unwrap();

        // rotate the batch by one
        let rot = |v: &[Real]| -> Vec<Real> {
            let s = l * d;
            let mut o = v[s..].to_vec();
            o.extend_from_slice(&v[..s]);
            o
        };
        let out_rot = h
            .align(
                &Tensor::from_vec(rot(&ta), vec![n, l, d]),
                &Tensor::from_vec(rot(&tb), vec![n, l, d]),
                &params,
            )
            .unwrap();
        for i in 0..n {
            let j = (i + n - 1) % n; // out sample i moved to position j
            for c in 0..d {
                assert!((out.values()[i * d + c] - out_rot.values()[j * d + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn classifier_zero_input_repeats_bias() {
        let cfg = AlignConfig {
            num_heads: 2,
            model_dim: 4,
            num_classes: 3,
        };
        let mut h = head(&cfg, 5);
        h.store.set_values("cls.b", vec![0.5, -1.0, 2.0]);
        let params = h.store.constants();
        let logits = h.classify(&Tensor::zeros(vec![2, 4]), &params).unwrap();
        assert_eq!(logits.values(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn favorable_weights_classify_by_construction() {
        let cfg = AlignConfig {
            num_heads: 1,
            model_dim: 3,
            num_classes: 3,
        };
        let mut h = head(&cfg, 6);
        let mut eye = vec![0.0 as Real; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        h.store.set_values("cls.w", eye);
        h.store.set_values("cls.b", vec![0.0; 3]);
        let params = h.store.constants();
        let embeddings = Tensor::from_vec(
            vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0],
            vec![3, 3],
        );
        let logits = h.classify(&embeddings, &params).unwrap();
        assert_eq!(accuracy(logits.values(), 3, &[0, 1, 2]), 1.0);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        for c in [2usize, 5, 10] {
            let logits = Tensor::zeros(vec![3, c]);
            let ce = cross_entropy(&logits, &[0, 1 % c, 2 % c]).unwrap();
            assert!((ce.item() - (c as Real).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn align_gradient_check() {
        let cfg = AlignConfig {
            num_heads: 2,
            model_dim: 4,
            num_classes: 2,
        };
        let h = head(&cfg, 7);
        let mut rng = rng_for(&[74]);
        let (n, l, d) = (2, 3, 4);
        let ta: Vec<Real> = (0..n * l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tb: Vec<Real> = (0..n * l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = vec![0usize, 1];
        for target in ["t2p.wq", "p2t.wv", "t2p.wo", "cls.w"] {
            let base = h.store.clone();
            let cfg = cfg.clone();
            let labels = labels.clone();
            let mut f = move |inp: &[Tensor]| {
                let head = AlignHead::from_store(cfg.clone(), base.clone()).unwrap();
                let mut params = head.store.constants();
                params.insert(target, inp[2].clone());
                let pooled = head.align(&inp[0], &inp[1], &params)?;
                let logits = head.classify(&pooled, &params)?;
                cross_entropy(&logits, &labels)
            };
            let entry = h.store.entry(target);
            crate::ad::check_gradient(
                &mut f,
                &[
                    (ta.clone(), vec![n, l, d]),
                    (tb.clone(), vec![n, l, d]),
                    (entry.values.clone(), entry.shape.clone()),
                ],
                1e-4,
                1e-4,
            )
            .unwrap_or_else(|e| panic!("{target}: {e}"));
        }
    }
}
