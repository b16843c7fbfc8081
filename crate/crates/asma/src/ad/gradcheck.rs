//! Central finite-difference gradient verification.
//!
//! The checker is independent of the tape: it re-evaluates the function on
//! perturbed plain inputs and compares the quotient against the analytic
//! gradient produced by `backward`.

use super::{AdResult, Tape, Tensor};
use crate::Real;

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub checked: usize,
}

/// Verify `f`'s gradients at the given inputs.
///
/// `f` must build a scalar loss from its inputs (which may be tracked leaves
/// or plain constants — the checker calls it both ways). Every coordinate of
/// every input is perturbed by ±`eps`; the analytic gradient must match the
/// central difference within `rtol` relative (plus a small absolute floor).
pub fn check_gradient(
    f: &mut dyn FnMut(&[Tensor]) -> AdResult<Tensor>,
    inputs: &[(Vec<Real>, Vec<usize>)],
    eps: Real,
    rtol: Real,
) -> Result<GradCheckReport, String> {
    // analytic pass
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(v, s)| tape.leaf(v.clone(), s.clone()))
        .collect();
    let loss = f(&leaves).map_err(|e| format!("forward failed: {e}"))?;
    loss.backward().map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<Real>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |f: &mut dyn FnMut(&[Tensor]) -> AdResult<Tensor>,
                points: &[(Vec<Real>, Vec<usize>)]|
     -> Result<Real, String> {
        let consts: Vec<Tensor> = points
            .iter()
            .map(|(v, s)| Tensor::from_vec(v.clone(), s.clone()))
            .collect();
        Ok(f(&consts).map_err(|e| format!("forward failed: {e}"))?.item())
    };

    let atol = eps * eps;
    let mut max_rel: Real = 0.0;
    let mut checked = 0;
    for (ti, (values, _)) in inputs.iter().enumerate() {
        for ci in 0..values.len() {
            let mut plus = inputs.to_vec();
            plus[ti].0[ci] += eps;
            let mut minus = inputs.to_vec();
            minus[ti].0[ci] -= eps;
            let fd = (eval(f, &plus)? - eval(f, &minus)?) / (2.0 * eps);
            let an = analytic[ti][ci];
            let denom = an.abs().max(fd.abs()).max(1.0);
            let rel = (an - fd).abs() / denom;
            if (an - fd).abs() > atol && rel > rtol {
                return Err(format!(
                    "input {ti} coord {ci}: analytic {an:.8e} vs finite-diff {fd:.8e} \
                     (rel {rel:.3e} > {rtol:.1e})"
                ));
            }
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
    })
}
