//! ST-GCN encoder: stacked graph-convolution + temporal-convolution units
//! with batch norm, relu and residual connections, followed by a linear
//! projection to the embedding dimension.

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, ParamTensors};
use super::ModelError;
use crate::ad::{batch_norm, AdResult, BnStats, Tensor};
use crate::data::SkeletonGraph;
use crate::util::rng_for;
use crate::Real;

/// Structural hyperparameters of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    /// Base channel width; the plan doubles it twice over the depth.
    pub hidden_channels: usize,
    /// Number of adjacency partitions: 1 uses the normalized adjacency
    /// alone, k > 1 uses hop powers `[I, Ã, Ã², ...]`.
    pub spatial_kernel: usize,
    /// Temporal kernel size; must be odd for symmetric padding.
    pub temporal_kernel: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_joints: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.temporal_kernel % 2 == 0 {
            return Err(ModelError::BadCheckpoint(format!(
                "temporal kernel {} must be odd",
                self.temporal_kernel
            )));
        }
        if self.embed_dim == 0 || self.num_layers == 0 || self.spatial_kernel == 0 {
            return Err(ModelError::BadCheckpoint(
                "embed_dim, num_layers and spatial_kernel must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-layer output channels and strides: three channel groups
    /// (x1, x2, x4 of the base width), each opening with a stride-2 layer
    /// except the first.
    pub fn layer_plan(&self) -> Vec<(usize, usize)> {
        let l = self.num_layers;
        let g1 = (l as f64 * 0.4).ceil() as usize;
        let g2 = ((l - g1) as f64 / 2.0).ceil() as usize;
        (0..l)
            .map(|i| {
                if i < g1 {
                    (self.hidden_channels, 1)
                } else if i < g1 + g2 {
                    (2 * self.hidden_channels, if i == g1 { 2 } else { 1 })
                } else {
                    (4 * self.hidden_channels, if i == g1 + g2 { 2 } else { 1 })
                }
            })
            .collect()
    }

    /// Temporal length of the token sequence after all stride-2 layers.
    pub fn tokens_len(&self, t_in: usize) -> usize {
        let k = self.temporal_kernel;
        let pad = (k - 1) / 2;
        let mut t = t_in;
        for (_, stride) in self.layer_plan() {
            t = (t + 2 * pad - k) / stride + 1;
        }
        t
    }
}

/// Symmetrically normalized adjacency `Ã = D^{-1/2}(A + I)D^{-1/2}` with D
/// the degree matrix of `A + I`. Row-major `V x V`.
pub fn normalize_adjacency(graph: &SkeletonGraph) -> Result<Vec<Real>, ModelError> {
    let v = graph.num_joints;
    if v == 0 {
        return Err(ModelError::DegenerateGraph("no joints".into()));
    }
    let mut a = vec![0.0 as Real; v * v];
    for i in 0..v {
        a[i * v + i] = 1.0;
    }
    for &(p, q) in &graph.edges {
        a[p * v + q] = 1.0;
        a[q * v + p] = 1.0;
    }
    let mut dinv = vec![0.0 as Real; v];
    for i in 0..v {
        let deg: Real = (0..v).map(|j| a[i * v + j]).sum();
        dinv[i] = 1.0 / deg.sqrt();
    }
    for i in 0..v {
        for j in 0..v {
            a[i * v + j] *= dinv[i] * dinv[j];
        }
    }
    Ok(a)
}

/// One ST-GCN encoder with its parameters and adjacency partitions.
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    /// Adjacency partitions, each `V x V`, untracked constants.
    partitions: Vec<Tensor>,
}

impl Encoder {
    /// Fresh encoder with fan-in scaled uniform weight init (biases zero,
    /// batch-norm affine at identity), seeded.
    pub fn new(cfg: EncoderConfig, graph: &SkeletonGraph, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let partitions = build_partitions(&cfg, graph)?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(&[seed, 0xE2C0DE]);
        let mut cin = cfg.in_channels;
        for (i, (cout, _)) in cfg.layer_plan().iter().enumerate() {
            for k in 0..cfg.spatial_kernel {
                store.add_uniform(&format!("l{i}.gc.w{k}"), vec![*cout, cin, 1], cin, &mut rng);
            }
            store.add(&format!("l{i}.gc.b"), vec![0.0; *cout], vec![*cout], true);
            add_bn(&mut store, &format!("l{i}.bn1"), *cout);
            store.add_uniform(
                &format!("l{i}.tc.w"),
                vec![*cout, *cout, cfg.temporal_kernel],
                cout * cfg.temporal_kernel,
                &mut rng,
            );
            store.add(&format!("l{i}.tc.b"), vec![0.0; *cout], vec![*cout], true);
            add_bn(&mut store, &format!("l{i}.bn2"), *cout);
            cin = *cout;
        }
        store.add_uniform("proj.w", vec![cfg.embed_dim, cin, 1], cin, &mut rng);
        store.add(
            "proj.b",
            vec![0.0; cfg.embed_dim],
            vec![cfg.embed_dim],
            true,
        );
        Ok(Self {
            cfg,
            store,
            partitions,
        })
    }

    /// Rewrap a store loaded from a checkpoint.
    pub fn from_store(
        cfg: EncoderConfig,
        graph: &SkeletonGraph,
        store: ParamStore,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let partitions = build_partitions(&cfg, graph)?;
        Ok(Self {
            cfg,
            store,
            partitions,
        })
    }

    /// Forward a batch `N x C x T x V`. Returns the token sequence
    /// `N x T' x embed_dim` and the pooled embedding `N x embed_dim`.
    ///
    /// In training mode batch-norm running statistics inside the store are
    /// updated in place.
    pub fn forward(
        &mut self,
        x: &Tensor,
        params: &ParamTensors,
        training: bool,
    ) -> AdResult<(Tensor, Tensor)> {
        let cfg = self.cfg.clone();
        let pad = (cfg.temporal_kernel - 1) / 2;
        let mut h = x.clone();
        let mut cin = cfg.in_channels;
        for (i, (cout, stride)) in cfg.layer_plan().iter().enumerate() {
            // spatial graph convolution: sum over adjacency partitions
            let mut gc: Option<Tensor> = None;
            for (k, part) in self.partitions.iter().enumerate() {
                let mixed = h
                    .graph_conv(part)?
                    .conv_temporal(params.get(&format!("l{i}.gc.w{k}")), 1, 0)?;
                gc = Some(match gc {
                    Some(acc) => acc.add(&mixed)?,
                    None => mixed,
                });
            }
            let gc = gc
                .expect("at least one partition")
                .add(params.get(&format!("l{i}.gc.b")))?;
            let gc = self.bn(&format!("l{i}.bn1"), &gc, params, training)?;
            let gc = gc.relu()?;

            let tc = gc
                .conv_temporal(params.get(&format!("l{i}.tc.w")), *stride, pad)?
                .add(params.get(&format!("l{i}.tc.b")))?;
            let tc = self.bn(&format!("l{i}.bn2"), &tc, params, training)?;

            // identity residual only where shapes line up
            let out = if *stride == 1 && cin == *cout {
                tc.add(&h)?
            } else {
                tc
            };
            h = out.relu()?;
            cin = *cout;
        }
        let projected = h
            .conv_temporal(params.get("proj.w"), 1, 0)?
            .add(params.get("proj.b"))?;
        // tokens: average joints, keep time
        let tokens = projected.mean(&[3])?.transpose(&[0, 2, 1])?;
        let pooled = tokens.mean(&[1])?;
        Ok((tokens, pooled))
    }

    fn bn(
        &mut self,
        prefix: &str,
        x: &Tensor,
        params: &ParamTensors,
        training: bool,
    ) -> AdResult<Tensor> {
        let mut stats = BnStats {
            mean: self.store.values(&format!("{prefix}.running_mean")).to_vec(),
            var: self.store.values(&format!("{prefix}.running_var")).to_vec(),
        };
        let y = batch_norm(
            x,
            params.get(&format!("{prefix}.gamma")),
            params.get(&format!("{prefix}.beta")),
            &mut stats,
            training,
            0.1,
            1e-5,
        )?;
        if training {
            self.store
                .set_values(&format!("{prefix}.running_mean"), stats.mean);
            self.store
                .set_values(&format!("{prefix}.running_var"), stats.var);
        }
        Ok(y)
    }

    pub fn count_params(&self) -> usize {
        self.store.num_learnable_scalars()
    }
}

fn add_bn(store: &mut ParamStore, prefix: &str, features: usize) {
    store.add(&format!("{prefix}.gamma"), vec![1.0; features], vec![features], true);
    store.add(&format!("{prefix}.beta"), vec![0.0; features], vec![features], true);
    store.add(
        &format!("{prefix}.running_mean"),
        vec![0.0; features],
        vec![features],
        false,
    );
    store.add(
        &format!("{prefix}.running_var"),
        vec![1.0; features],
        vec![features],
        false,
    );
}

fn build_partitions(cfg: &EncoderConfig, graph: &SkeletonGraph) -> Result<Vec<Tensor>, ModelError> {
    if graph.num_joints != cfg.num_joints {
        return Err(ModelError::DegenerateGraph(format!(
            "config expects {} joints, graph has {}",
            cfg.num_joints, graph.num_joints
        )));
    }
    let v = cfg.num_joints;
    let norm = normalize_adjacency(graph)?;
    let mut parts = Vec::with_capacity(cfg.spatial_kernel);
    if cfg.spatial_kernel == 1 {
        parts.push(Tensor::from_vec(norm, vec![v, v]));
        return Ok(parts);
    }
    // hop powers: identity, Ã, Ã², ...
    let mut eye = vec![0.0 as Real; v * v];
    for i in 0..v {
        eye[i * v + i] = 1.0;
    }
    let mut cur = eye.clone();
    parts.push(Tensor::from_vec(eye, vec![v, v]));
    for _ in 1..cfg.spatial_kernel {
        let mut next = vec![0.0 as Real; v * v];
        for i in 0..v {
            for p in 0..v {
                let c = cur[i * v + p];
                if c == 0.0 {
                    continue;
                }
                for j in 0..v {
                    next[i * v + j] += c * norm[p * v + j];
                }
            }
        }
        parts.push(Tensor::from_vec(next.clone(), vec![v, v]));
        cur = next;
    }
    Ok(parts)
}

/// Forward-pass FLOPs (multiply-accumulates x 2) of one encoder at the
/// given input size, counting the convolution contractions.
pub fn count_flops(cfg: &EncoderConfig, t_in: usize, v: usize) -> usize {
    let k = cfg.temporal_kernel;
    let pad = (k - 1) / 2;
    let mut macs = 0usize;
    let mut cin = cfg.in_channels;
    let mut t = t_in;
    for (cout, stride) in cfg.layer_plan() {
        // adjacency contraction + channel mix, per partition
        macs += cfg.spatial_kernel * (cin * t * v * v + t * v * cin * cout);
        let t_out = (t + 2 * pad - k) / stride + 1;
        macs += t_out * v * cout * cout * k;
        t = t_out;
        cin = cout;
    }
    macs += t * v * cin * cfg.embed_dim;
    macs * 2
}
