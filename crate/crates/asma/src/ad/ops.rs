//! Tensor primitives: elementwise arithmetic, matrix products, shape ops,
//! reductions, activations, batch normalization, temporal convolution, and
//! graph convolution. Reductions accumulate left-to-right in input order so
//! results are bit-reproducible.

use std::rc::Rc;

use super::{make_output, row_major_strides, AdError, AdResult, Tensor};
use crate::Real;

/// Broadcast patterns accepted by `add`/`sub` (`mul`/`div` accept only the
/// first three).
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    ScalarRhs,
    ScalarLhs,
    /// rhs is 1-D along lhs axis 1 (channel of a 4-D map, feature of a 2-D
    /// matrix): `inner` elements repeat per feature, `features` per row.
    BiasRhs { features: usize, inner: usize },
}

fn classify_broadcast(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
    allow_bias: bool,
) -> AdResult<Broadcast> {
    let (ln, rn) = (
        lhs.iter().product::<usize>(),
        rhs.iter().product::<usize>(),
    );
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if rn == 1 {
        return Ok(Broadcast::ScalarRhs);
    }
    if ln == 1 {
        return Ok(Broadcast::ScalarLhs);
    }
    if allow_bias && rhs.len() == 1 && lhs.len() >= 2 && rhs[0] == lhs[1] {
        return Ok(Broadcast::BiasRhs {
            features: lhs[1],
            inner: lhs[2..].iter().product(),
        });
    }
    Err(AdError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn reduce_like_rhs(g: &[Real], bc: Broadcast, rhs_len: usize) -> Vec<Real> {
    match bc {
        Broadcast::Same => g.to_vec(),
        Broadcast::ScalarRhs | Broadcast::ScalarLhs => vec![g.iter().sum()],
        Broadcast::BiasRhs { features, inner } => {
            let mut out = vec![0.0; rhs_len];
            for (i, &gi) in g.iter().enumerate() {
                out[(i / inner) % features] += gi;
            }
            out
        }
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> AdResult<Tensor> {
        self.add_sub(rhs, "add", 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> AdResult<Tensor> {
        self.add_sub(rhs, "sub", -1.0)
    }

    fn add_sub(&self, rhs: &Tensor, op: &'static str, sign: Real) -> AdResult<Tensor> {
        let bc = classify_broadcast(op, self.shape(), rhs.shape(), true)?;
        let (a, b) = (self.values(), rhs.values());
        let (values, shape) = match bc {
            Broadcast::Same => (
                a.iter().zip(b).map(|(x, y)| x + sign * y).collect(),
                self.shape().to_vec(),
            ),
            Broadcast::ScalarRhs => (
                a.iter().map(|x| x + sign * b[0]).collect(),
                self.shape().to_vec(),
            ),
            Broadcast::ScalarLhs => (
                b.iter().map(|y| a[0] + sign * y).collect(),
                rhs.shape().to_vec(),
            ),
            Broadcast::BiasRhs { features, inner } => (
                a.iter()
                    .enumerate()
                    .map(|(i, x)| x + sign * b[(i / inner) % features])
                    .collect(),
                self.shape().to_vec(),
            ),
        };
        let lb = b.len();
        make_output(op, &[self, rhs], values, shape, |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let ga = needs[0].then(|| match bc {
                    Broadcast::ScalarLhs => vec![g.iter().sum()],
                    _ => g.to_vec(),
                });
                let gb = needs[1].then(|| {
                    let mut r = match bc {
                        Broadcast::ScalarLhs => g.to_vec(),
                        _ => reduce_like_rhs(g, bc, lb),
                    };
                    if sign < 0.0 {
                        for x in &mut r {
                            *x = -*x;
                        }
                    }
                    r
                });
                vec![ga, gb]
            })
        })
    }

    pub fn mul(&self, rhs: &Tensor) -> AdResult<Tensor> {
        let bc = classify_broadcast("mul", self.shape(), rhs.shape(), false)?;
        let (a, b) = (self.values(), rhs.values());
        let (values, shape): (Vec<Real>, Vec<usize>) = match bc {
            Broadcast::Same => (
                a.iter().zip(b).map(|(x, y)| x * y).collect(),
                self.shape().to_vec(),
            ),
            Broadcast::ScalarRhs => (a.iter().map(|x| x * b[0]).collect(), self.shape().to_vec()),
            Broadcast::ScalarLhs => (b.iter().map(|y| a[0] * y).collect(), rhs.shape().to_vec()),
            Broadcast::BiasRhs { .. } => unreachable!(),
        };
        let (da, db) = (self.data.clone(), rhs.data.clone());
        make_output("mul", &[self, rhs], values, shape, |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let ga = needs[0].then(|| match bc {
                    Broadcast::Same => g.iter().zip(&db.values).map(|(gi, y)| gi * y).collect(),
                    Broadcast::ScalarRhs => g.iter().map(|gi| gi * db.values[0]).collect(),
                    Broadcast::ScalarLhs => {
                        vec![g.iter().zip(&db.values).map(|(gi, y)| gi * y).sum()]
                    }
                    Broadcast::BiasRhs { .. } => unreachable!(),
                });
                let gb = needs[1].then(|| match bc {
                    Broadcast::Same => g.iter().zip(&da.values).map(|(gi, x)| gi * x).collect(),
                    Broadcast::ScalarRhs => {
                        vec![g.iter().zip(&da.values).map(|(gi, x)| gi * x).sum()]
                    }
                    Broadcast::ScalarLhs => g.iter().map(|gi| gi * da.values[0]).collect(),
                    Broadcast::BiasRhs { .. } => unreachable!(),
                });
                vec![ga, gb]
            })
        })
    }

    pub fn div(&self, rhs: &Tensor) -> AdResult<Tensor> {
        let bc = classify_broadcast("div", self.shape(), rhs.shape(), false)?;
        let (a, b) = (self.values(), rhs.values());
        let (values, shape): (Vec<Real>, Vec<usize>) = match bc {
            Broadcast::Same => (
                a.iter().zip(b).map(|(x, y)| x / y).collect(),
                self.shape().to_vec(),
            ),
            Broadcast::ScalarRhs => (a.iter().map(|x| x / b[0]).collect(), self.shape().to_vec()),
            Broadcast::ScalarLhs => (b.iter().map(|y| a[0] / y).collect(), rhs.shape().to_vec()),
            Broadcast::BiasRhs { .. } => unreachable!(),
        };
        let (da, db) = (self.data.clone(), rhs.data.clone());
        make_output("div", &[self, rhs], values, shape, |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let ga = needs[0].then(|| match bc {
                    Broadcast::Same => g.iter().zip(&db.values).map(|(gi, y)| gi / y).collect(),
                    Broadcast::ScalarRhs => g.iter().map(|gi| gi / db.values[0]).collect(),
                    Broadcast::ScalarLhs => {
                        vec![g.iter().zip(&db.values).map(|(gi, y)| gi / y).sum()]
                    }
                    Broadcast::BiasRhs { .. } => unreachable!(),
                });
                let gb = needs[1].then(|| match bc {
                    Broadcast::Same => g
                        .iter()
                        .zip(&da.values)
                        .zip(&db.values)
                        .map(|((gi, x), y)| -gi * x / (y * y))
                        .collect(),
                    Broadcast::ScalarRhs => {
                        let y = db.values[0];
                        vec![g
                            .iter()
                            .zip(&da.values)
                            .map(|(gi, x)| -gi * x / (y * y))
                            .sum()]
                    }
                    Broadcast::ScalarLhs => {
                        let x = da.values[0];
                        g.iter()
                            .zip(&db.values)
                            .map(|(gi, y)| -gi * x / (y * y))
                            .collect()
                    }
                    Broadcast::BiasRhs { .. } => unreachable!(),
                });
                vec![ga, gb]
            })
        })
    }

    /// Multiply by a plain scalar constant.
    pub fn scale(&self, s: Real) -> AdResult<Tensor> {
        let values = self.values().iter().map(|x| x * s).collect();
        make_output("scale", &[self], values, self.shape().to_vec(), |needs| {
            let need = needs[0];
            Box::new(move |g| vec![need.then(|| g.iter().map(|gi| gi * s).collect())])
        })
    }

    pub fn neg(&self) -> AdResult<Tensor> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, rhs: &Tensor) -> AdResult<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let values = matmul_kernel(self.values(), rhs.values(), m, k, n);
        let (da, db) = (self.data.clone(), rhs.data.clone());
        make_output("matmul", &[self, rhs], values, vec![m, n], |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                // gA = g · Bᵀ ; gB = Aᵀ · g
                let ga = needs[0].then(|| matmul_nt(g, &db.values, m, n, k));
                let gb = needs[1].then(|| matmul_tn(&da.values, g, m, k, n));
                vec![ga, gb]
            })
        })
    }

    /// Batched matrix product over rank-3 tensors: `(B,m,k) x (B,k,n)`.
    pub fn batched_matmul(&self, rhs: &Tensor) -> AdResult<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 3 || rs.len() != 3 || ls[0] != rs[0] || ls[2] != rs[1] {
            return Err(AdError::ShapeMismatch {
                op: "batched_matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (bn, m, k, n) = (ls[0], ls[1], ls[2], rs[2]);
        let mut values = vec![0.0; bn * m * n];
        for b in 0..bn {
            let out = matmul_kernel(
                &self.values()[b * m * k..(b + 1) * m * k],
                &rhs.values()[b * k * n..(b + 1) * k * n],
                m,
                k,
                n,
            );
            values[b * m * n..(b + 1) * m * n].copy_from_slice(&out);
        }
        let (da, db) = (self.data.clone(), rhs.data.clone());
        make_output(
            "batched_matmul",
            &[self, rhs],
            values,
            vec![bn, m, n],
            |needs| {
                let needs = needs.to_vec();
                Box::new(move |g| {
                    let ga = needs[0].then(|| {
                        let mut out = vec![0.0; bn * m * k];
                        for b in 0..bn {
                            let gb = matmul_nt(
                                &g[b * m * n..(b + 1) * m * n],
                                &db.values[b * k * n..(b + 1) * k * n],
                                m,
                                n,
                                k,
                            );
                            out[b * m * k..(b + 1) * m * k].copy_from_slice(&gb);
                        }
                        out
                    });
                    let gb = needs[1].then(|| {
                        let mut out = vec![0.0; bn * k * n];
                        for b in 0..bn {
                            let gg = matmul_tn(
                                &da.values[b * m * k..(b + 1) * m * k],
                                &g[b * m * n..(b + 1) * m * n],
                                m,
                                k,
                                n,
                            );
                            out[b * k * n..(b + 1) * k * n].copy_from_slice(&gg);
                        }
                        out
                    });
                    vec![ga, gb]
                })
            },
        )
    }

    /// Permute axes; `perm` must be a permutation of `0..rank`.
    pub fn transpose(&self, perm: &[usize]) -> AdResult<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(AdError::InvalidShape {
                op: "transpose",
                reason: format!("perm {perm:?} is not a permutation of 0..{rank}"),
            });
        }
        let (values, shape) = permute(self.values(), self.shape(), perm);
        let inv: Vec<usize> = {
            let mut inv = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        let out_shape = shape.clone();
        make_output("transpose", &[self], values, shape, |needs| {
            let need = needs[0];
            Box::new(move |g| vec![need.then(|| permute(g, &out_shape, &inv).0)])
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> AdResult<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(AdError::InvalidShape {
                op: "reshape",
                reason: format!(
                    "cannot reshape {:?} ({} elements) to {shape:?}",
                    self.shape(),
                    self.numel()
                ),
            });
        }
        make_output(
            "reshape",
            &[self],
            self.values().to_vec(),
            shape.to_vec(),
            |needs| {
                let need = needs[0];
                Box::new(move |g| vec![need.then(|| g.to_vec())])
            },
        )
    }

    /// Concatenate along `axis`; all inputs must agree on the other axes.
    pub fn concat(tensors: &[&Tensor], axis: usize) -> AdResult<Tensor> {
        let first = tensors.first().ok_or(AdError::InvalidShape {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(AdError::InvalidShape {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut axis_total = 0;
        for t in tensors {
            if t.shape().len() != rank
                || t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            axis_total += t.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();

        let mut values = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(tensors.len());
        for t in tensors {
            let a = t.shape()[axis];
            for o in 0..outer {
                let src = &t.values()[o * a * inner..(o + 1) * a * inner];
                let dst_start = o * axis_total * inner + offset * inner;
                values[dst_start..dst_start + a * inner].copy_from_slice(src);
            }
            spans.push((offset, a));
            offset += a;
        }
        make_output("concat", tensors, values, shape, |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                spans
                    .iter()
                    .zip(&needs)
                    .map(|(&(off, a), &need)| {
                        need.then(|| {
                            let mut out = vec![0.0; outer * a * inner];
                            for o in 0..outer {
                                let src_start = o * axis_total * inner + off * inner;
                                out[o * a * inner..(o + 1) * a * inner]
                                    .copy_from_slice(&g[src_start..src_start + a * inner]);
                            }
                            out
                        })
                    })
                    .collect()
            })
        })
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> AdResult<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(AdError::InvalidShape {
                op: "slice",
                reason: format!("range {start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let a_in = shape[axis];
        let a_out = end - start;
        let mut out_shape = shape.to_vec();
        out_shape[axis] = a_out;
        let mut values = vec![0.0; outer * a_out * inner];
        for o in 0..outer {
            let src = o * a_in * inner + start * inner;
            values[o * a_out * inner..(o + 1) * a_out * inner]
                .copy_from_slice(&self.values()[src..src + a_out * inner]);
        }
        make_output("slice", &[self], values, out_shape, |needs| {
            let need = needs[0];
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![0.0; outer * a_in * inner];
                    for o in 0..outer {
                        let dst = o * a_in * inner + start * inner;
                        out[dst..dst + a_out * inner]
                            .copy_from_slice(&g[o * a_out * inner..(o + 1) * a_out * inner]);
                    }
                    out
                })]
            })
        })
    }

    pub fn relu(&self) -> AdResult<Tensor> {
        let values = self.values().iter().map(|&x| x.max(0.0)).collect();
        let da = self.data.clone();
        make_output("relu", &[self], values, self.shape().to_vec(), |needs| {
            let need = needs[0];
            Box::new(move |g| {
                vec![need.then(|| {
                    g.iter()
                        .zip(&da.values)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect()
                })]
            })
        })
    }

    pub fn log(&self) -> AdResult<Tensor> {
        let values = self.values().iter().map(|x| x.ln()).collect();
        let da = self.data.clone();
        make_output("log", &[self], values, self.shape().to_vec(), |needs| {
            let need = needs[0];
            Box::new(move |g| {
                vec![need.then(|| g.iter().zip(&da.values).map(|(gi, x)| gi / x).collect())]
            })
        })
    }

    pub fn exp(&self) -> AdResult<Tensor> {
        let values: Vec<Real> = self.values().iter().map(|x| x.exp()).collect();
        let saved = values.clone();
        make_output("exp", &[self], values, self.shape().to_vec(), |needs| {
            let need = needs[0];
            Box::new(move |g| {
                vec![need.then(|| g.iter().zip(&saved).map(|(gi, y)| gi * y).collect())]
            })
        })
    }

    pub fn sqrt(&self) -> AdResult<Tensor> {
        let values: Vec<Real> = self.values().iter().map(|x| x.sqrt()).collect();
        let saved = values.clone();
        make_output("sqrt", &[self], values, self.shape().to_vec(), |needs| {
            let need = needs[0];
            Box::new(move |g| {
                vec![need.then(|| g.iter().zip(&saved).map(|(gi, y)| gi / (2.0 * y)).collect())]
            })
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> AdResult<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AdError::InvalidShape {
                op: "softmax",
                reason: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.values();
        let mut values = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    values[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    values[at(j)] /= z;
                }
            }
        }
        let saved = values.clone();
        make_output("softmax", &[self], values, shape.to_vec(), |needs| {
            let need = needs[0];
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: Real = (0..len).map(|j| g[at(j)] * saved[at(j)]).sum();
                            for j in 0..len {
                                out[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    out
                })]
            })
        })
    }

    pub fn sum(&self, axes: &[usize]) -> AdResult<Tensor> {
        self.reduce(axes, false)
    }

    pub fn mean(&self, axes: &[usize]) -> AdResult<Tensor> {
        self.reduce(axes, true)
    }

    fn reduce(&self, axes: &[usize], mean: bool) -> AdResult<Tensor> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(AdError::InvalidShape {
                    op: if mean { "mean" } else { "sum" },
                    reason: format!("axis {a} out of range for {shape:?}"),
                });
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter_map(|(&d, &r)| (!r).then_some(d))
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter_map(|(&d, &r)| r.then_some(d))
            .product();
        let scale = if mean { 1.0 / count as Real } else { 1.0 };

        let in_strides = row_major_strides(&shape);
        let out_strides = row_major_strides(&out_shape);
        // out position for each input element, computed once and reused by
        // both passes so forward accumulation order is fixed
        let map_index = move |idx: usize| -> usize {
            let mut rem = idx;
            let mut out = 0;
            let mut oi = 0;
            for d in 0..rank {
                let c = rem / in_strides[d];
                rem %= in_strides[d];
                if !reduced[d] {
                    out += c * out_strides[oi];
                    oi += 1;
                }
            }
            out
        };

        let mut values = vec![0.0; out_shape.iter().product::<usize>().max(1)];
        for (idx, &x) in self.values().iter().enumerate() {
            values[map_index(idx)] += x;
        }
        if mean {
            for v in &mut values {
                *v *= scale;
            }
        }
        let in_len = self.numel();
        make_output(
            if mean { "mean" } else { "sum" },
            &[self],
            values,
            out_shape,
            |needs| {
                let need = needs[0];
                Box::new(move |g| {
                    vec![need.then(|| (0..in_len).map(|i| g[map_index(i)] * scale).collect())]
                })
            },
        )
    }

    /// Temporal convolution over `N x C_in x T x V` with weights
    /// `C_out x C_in x k`; convolves the T axis only.
    pub fn conv_temporal(&self, weight: &Tensor, stride: usize, pad: usize) -> AdResult<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(AdError::ShapeMismatch {
                op: "conv_temporal",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, cin, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if stride == 0 || t + 2 * pad < k {
            return Err(AdError::InvalidShape {
                op: "conv_temporal",
                reason: format!("kernel {k} with pad {pad}, stride {stride} on T={t}"),
            });
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let x = self.values();
        let w = weight.values();
        let mut values = vec![0.0; n * cout * t_out * v];
        for b in 0..n {
            for o in 0..cout {
                for to in 0..t_out {
                    let dst = ((b * cout + o) * t_out + to) * v;
                    let out_row = &mut values[dst..dst + v];
                    for i in 0..cin {
                        for dk in 0..k {
                            let ti = (to * stride + dk) as isize - pad as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let wv = w[(o * cin + i) * k + dk];
                            let src = ((b * cin + i) * t + ti as usize) * v;
                            let x_row = &x[src..src + v];
                            for (ov, xv) in out_row.iter_mut().zip(x_row) {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        let (dx, dw) = (self.data.clone(), weight.data.clone());
        make_output(
            "conv_temporal",
            &[self, weight],
            values,
            vec![n, cout, t_out, v],
            |needs| {
                let needs = needs.to_vec();
                Box::new(move |g| {
                    let gx = needs[0].then(|| {
                        let mut out = vec![0.0; n * cin * t * v];
                        for b in 0..n {
                            for o in 0..cout {
                                for to in 0..t_out {
                                    let gsrc = ((b * cout + o) * t_out + to) * v;
                                    let g_row = &g[gsrc..gsrc + v];
                                    for i in 0..cin {
                                        for dk in 0..k {
                                            let ti =
                                                (to * stride + dk) as isize - pad as isize;
                                            if ti < 0 || ti >= t as isize {
                                                continue;
                                            }
                                            let wv = dw.values[(o * cin + i) * k + dk];
                                            let dst = ((b * cin + i) * t + ti as usize) * v;
                                            let o_row = &mut out[dst..dst + v];
                                            for (ov, gi) in o_row.iter_mut().zip(g_row) {
                                                *ov += wv * gi;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        out
                    });
                    let gw = needs[1].then(|| {
                        let mut out = vec![0.0; cout * cin * k];
                        for o in 0..cout {
                            for i in 0..cin {
                                for dk in 0..k {
                                    let mut acc = 0.0;
                                    for b in 0..n {
                                        for to in 0..t_out {
                                            let ti =
                                                (to * stride + dk) as isize - pad as isize;
                                            if ti < 0 || ti >= t as isize {
                                                continue;
                                            }
                                            let gsrc = ((b * cout + o) * t_out + to) * v;
                                            let xsrc =
                                                ((b * cin + i) * t + ti as usize) * v;
                                            let g_row = &g[gsrc..gsrc + v];
                                            let x_row = &dx.values[xsrc..xsrc + v];
                                            acc += g_row
                                                .iter()
                                                .zip(x_row)
                                                .map(|(a, b)| a * b)
                                                .sum::<Real>();
                                        }
                                    }
                                    out[(o * cin + i) * k + dk] = acc;
                                }
                            }
                        }
                        out
                    });
                    vec![gx, gw]
                })
            },
        )
    }

    /// Graph convolution: contract the joint axis of `N x C x T x V`
    /// against a `V x V` matrix: `out[n,c,t,u] = Σ_v x[n,c,t,v]·adj[v,u]`.
    pub fn graph_conv(&self, adj: &Tensor) -> AdResult<Tensor> {
        let xs = self.shape();
        let as_ = adj.shape();
        if xs.len() != 4 || as_.len() != 2 || as_[0] != as_[1] || xs[3] != as_[0] {
            return Err(AdError::ShapeMismatch {
                op: "graph_conv",
                lhs: xs.to_vec(),
                rhs: as_.to_vec(),
            });
        }
        let (n, c, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let rows = n * c * t;
        let values = matmul_kernel(self.values(), adj.values(), rows, v, v);
        let (dx, da) = (self.data.clone(), adj.data.clone());
        make_output("graph_conv", &[self, adj], values, xs.to_vec(), |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let gx = needs[0].then(|| matmul_nt(g, &da.values, rows, v, v));
                let gadj = needs[1].then(|| matmul_tn(&dx.values, g, rows, v, v));
                vec![gx, gadj]
            })
        })
    }
}

/// Batch-norm running statistics (one slot per feature).
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl BnStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

/// Batch normalization over axis 1 (features of a 2-D matrix, channels of a
/// 4-D map).
///
/// Training mode normalizes with the biased batch variance and updates the
/// running statistics in place (unbiased variance, momentum `momentum`).
/// Eval mode is an affine map using the running statistics.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    training: bool,
    momentum: Real,
    eps: Real,
) -> AdResult<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(AdError::InvalidShape {
            op: "batch_norm",
            reason: format!("expected rank 2 or 4, got {shape:?}"),
        });
    }
    let features = shape[1];
    if gamma.numel() != features || beta.numel() != features || stats.mean.len() != features {
        return Err(AdError::ShapeMismatch {
            op: "batch_norm",
            lhs: shape,
            rhs: gamma.shape().to_vec(),
        });
    }
    let inner: usize = shape[2..].iter().product();
    let outer = shape[0];
    let group = outer * inner; // elements per feature
    let xv = x.values();
    let at = move |o: usize, f: usize, i: usize| (o * features + f) * inner + i;

    let (mean, var) = if training {
        let mut mean = vec![0.0; features];
        let mut var = vec![0.0; features];
        for f in 0..features {
            let mut acc = 0.0;
            for o in 0..outer {
                for i in 0..inner {
                    acc += xv[at(o, f, i)];
                }
            }
            mean[f] = acc / group as Real;
            let mut acc2 = 0.0;
            for o in 0..outer {
                for i in 0..inner {
                    let d = xv[at(o, f, i)] - mean[f];
                    acc2 += d * d;
                }
            }
            var[f] = acc2 / group as Real;
        }
        // running update uses the unbiased variance (standard convention)
        let unbias = if group > 1 {
            group as Real / (group - 1) as Real
        } else {
            1.0
        };
        for f in 0..features {
            stats.mean[f] = (1.0 - momentum) * stats.mean[f] + momentum * mean[f];
            stats.var[f] = (1.0 - momentum) * stats.var[f] + momentum * var[f] * unbias;
        }
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };

    let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let gv = gamma.values();
    let bv = beta.values();
    let mut xhat = vec![0.0; xv.len()];
    let mut values = vec![0.0; xv.len()];
    for o in 0..outer {
        for f in 0..features {
            for i in 0..inner {
                let idx = at(o, f, i);
                let h = (xv[idx] - mean[f]) * inv_std[f];
                xhat[idx] = h;
                values[idx] = gv[f] * h + bv[f];
            }
        }
    }

    let xhat = Rc::new(xhat);
    let inv_std = Rc::new(inv_std);
    let dgamma_src = x.shape().to_vec();
    let gamma_vals = gv.to_vec();
    make_output("batch_norm", &[x, gamma, beta], values, dgamma_src, |needs| {
        let needs = needs.to_vec();
        let xhat = xhat.clone();
        let inv_std = inv_std.clone();
        Box::new(move |g| {
            let gx = needs[0].then(|| {
                let mut out = vec![0.0; g.len()];
                if training {
                    // d_xhat = g*gamma; dx = inv_std/M * (M*d_xhat
                    //          - Σ d_xhat - xhat * Σ d_xhat*xhat)
                    for f in 0..features {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = at(o, f, i);
                                let d = g[idx] * gamma_vals[f];
                                sum_d += d;
                                sum_dx += d * xhat[idx];
                            }
                        }
                        let m = group as Real;
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = at(o, f, i);
                                let d = g[idx] * gamma_vals[f];
                                out[idx] = inv_std[f] / m
                                    * (m * d - sum_d - xhat[idx] * sum_dx);
                            }
                        }
                    }
                } else {
                    for o in 0..outer {
                        for f in 0..features {
                            for i in 0..inner {
                                let idx = at(o, f, i);
                                out[idx] = g[idx] * gamma_vals[f] * inv_std[f];
                            }
                        }
                    }
                }
                out
            });
            let ggamma = needs[1].then(|| {
                let mut out = vec![0.0; features];
                for o in 0..outer {
                    for f in 0..features {
                        for i in 0..inner {
                            let idx = at(o, f, i);
                            out[f] += g[idx] * xhat[idx];
                        }
                    }
                }
                out
            });
            let gbeta = needs[2].then(|| {
                let mut out = vec![0.0; features];
                for o in 0..outer {
                    for f in 0..features {
                        for i in 0..inner {
                            out[f] += g[at(o, f, i)];
                        }
                    }
                }
                out
            });
            vec![gx, ggamma, gbeta]
        })
    })
}

/// `C = A·B` with A `m x k`, B `k x n`; i-k-j loop order with contiguous
/// row updates.
fn matmul_kernel(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C = A·Bᵀ` with A `m x n`, B `k x n` (result `m x k`).
fn matmul_nt(a: &[Real], b: &[Real], m: usize, n: usize, k: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            c[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C = Aᵀ·B` with A `m x k`, B `m x n` (result `k x n`).
fn matmul_tn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; k * n];
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (j, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[j * n..(j + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn permute(values: &[Real], shape: &[usize], perm: &[usize]) -> (Vec<Real>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let out_strides = row_major_strides(&out_shape);
    // input axis d lands at output position inv[d]
    let mut inv = vec![0; rank];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let mut out = vec![0.0; values.len()];
    for (idx, &x) in values.iter().enumerate() {
        let mut rem = idx;
        let mut dst = 0;
        for d in 0..rank {
            let c = rem / in_strides[d];
            rem %= in_strides[d];
            dst += c * out_strides[inv[d]];
        }
        out[dst] = x;
    }
    (out, out_shape)
}
