//! Stochastic augmentations: temporal crop + resize, 3D rotation,
//! left-right flip.

use ndarray::Array3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::SkeletonSequence;
use crate::{Real, Rng};

/// Parameters of the augmentation pipeline. Draw order per call is fixed
/// (crop ratio, crop start, three rotation angles, flip coin), so a given
/// RNG state always produces the same view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// `[lo, hi]` fraction of T kept by the temporal crop; `[1, 1]` disables.
    pub crop_ratio_range: [Real; 2],
    /// Maximum per-axis rotation in degrees; 0 disables.
    pub rotation_max_deg: Real,
    /// Probability of mirroring left/right.
    pub flip_probability: Real,
    /// Base seed recorded with the config (actual draws come from the RNG
    /// state passed to [`augment`]).
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_ratio_range: [0.6, 1.0],
            rotation_max_deg: 17.0,
            flip_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            crop_ratio_range: [1.0, 1.0],
            rotation_max_deg: 0.0,
            flip_probability: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.crop_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(format!("crop ratio range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"));
        }
        if self.rotation_max_deg < 0.0 {
            return Err("rotation_max_deg must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err("flip_probability must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Apply crop-resize, rotation and flip in order. Output shape equals the
/// input shape; deterministic given the RNG state.
pub fn augment(x: &SkeletonSequence, spec: &AugmentationSpec, rng: &mut Rng) -> SkeletonSequence {
    let (_, t_n, _) = x.data.dim();

    let ratio = rng.gen_range(spec.crop_ratio_range[0]..=spec.crop_ratio_range[1]);
    let len = ((ratio * t_n as Real).ceil() as usize).clamp(2, t_n);
    let start = rng.gen_range(0..=(t_n - len));
    let mut data = crop_resize(&x.data, start, len);

    let max = spec.rotation_max_deg;
    let angles = [
        rng.gen_range(-max..=max),
        rng.gen_range(-max..=max),
        rng.gen_range(-max..=max),
    ];
    if max > 0.0 && data.dim().0 == 3 {
        data = rotate(&data, angles);
    }

    let coin: Real = rng.gen_range(0.0..1.0);
    if coin < spec.flip_probability {
        flip_in_place(&mut data, &x.graph.symmetric_pairs);
    }

    SkeletonSequence { data, graph: x.graph.clone(), label: x.label }
}

/// Crop `len` contiguous frames starting at `start`, then resize back to the
/// original frame count with linear interpolation.
pub fn crop_resize(data: &Array3<Real>, start: usize, len: usize) -> Array3<Real> {
    let (c_n, t_n, v_n) = data.dim();
    assert!(len >= 2 && start + len <= t_n, "invalid crop window");
    if len == t_n {
        return data.clone();
    }
    let mut out = Array3::zeros((c_n, t_n, v_n));
    let scale = (len - 1) as Real / (t_n - 1) as Real;
    for ti in 0..t_n {
        let pos = ti as Real * scale;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        let frac = pos - lo as Real;
        let (src_lo, src_hi) = (start + lo, start + hi);
        for c in 0..c_n {
            for v in 0..v_n {
                out[[c, ti, v]] =
                    (1.0 - frac) * data[[c, src_lo, v]] + frac * data[[c, src_hi, v]];
            }
        }
    }
    out
}

/// Rotate all frames by per-axis angles (degrees), applied as Rz·Ry·Rx.
/// Requires three coordinate channels.
pub fn rotate_sequence(x: &SkeletonSequence, angles_deg: [Real; 3]) -> SkeletonSequence {
    assert_eq!(x.channels(), 3, "rotation needs 3 coordinate channels");
    SkeletonSequence {
        data: rotate(&x.data, angles_deg),
        graph: x.graph.clone(),
        label: x.label,
    }
}

fn rotate(data: &Array3<Real>, angles_deg: [Real; 3]) -> Array3<Real> {
    let to_rad = std::f64::consts::PI as Real / 180.0;
    let (sx, cx) = (angles_deg[0] * to_rad).sin_cos();
    let (sy, cy) = (angles_deg[1] * to_rad).sin_cos();
    let (sz, cz) = (angles_deg[2] * to_rad).sin_cos();
    // Rz * Ry * Rx
    let r = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ];
    let (_, t_n, v_n) = data.dim();
    let mut out = Array3::zeros((3, t_n, v_n));
    for t in 0..t_n {
        for v in 0..v_n {
            let p = [data[[0, t, v]], data[[1, t, v]], data[[2, t, v]]];
            for (c, row) in r.iter().enumerate() {
                out[[c, t, v]] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            }
        }
    }
    out
}

fn flip_in_place(data: &mut Array3<Real>, pairs: &[(usize, usize)]) {
    let (c_n, t_n, v_n) = data.dim();
    // mirror the x axis
    for t in 0..t_n {
        for v in 0..v_n {
            data[[0, t, v]] = -data[[0, t, v]];
        }
    }
    for &(a, b) in pairs {
        for c in 0..c_n {
            for t in 0..t_n {
                let tmp = data[[c, t, a]];
                data[[c, t, a]] = data[[c, t, b]];
                data[[c, t, b]] = tmp;
            }
        }
    }
}
