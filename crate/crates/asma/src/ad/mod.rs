//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Tensors are flat row-major `Real` buffers plus a shape. Operations on
//! tensors that are tracked on a [`Tape`] record a node with a backward
//! closure; [`Tensor::backward`] walks the tape in reverse and deposits
//! gradients on the leaves. One tape serves one forward/backward pass and is
//! consumed by `backward`; training loops build a fresh tape per step.
//!
//! Broadcasting is deliberately restricted: binary elementwise ops accept
//! equal shapes, a scalar on either side, or a 1-D bias added along the
//! channel axis (axis 1 of a 4-D tensor, last axis of a 2-D tensor). Any
//! other shape combination is a [`AdError::ShapeMismatch`].

mod gradcheck;
mod ops;

pub use gradcheck::{check_gradient, GradCheckReport};
pub use ops::{batch_norm, BnStats};

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape in {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteDetected(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor is not recorded on a tape")]
    NoTape,
}

pub type AdResult<T> = Result<T, AdError>;

pub(crate) struct TensorData {
    shape: Vec<usize>,
    values: Vec<Real>,
    grad: RefCell<Option<Vec<Real>>>,
}

type BackwardFn = Box<dyn Fn(&[Real]) -> Vec<Option<Vec<Real>>>>;

struct Node {
    /// Tape ids of tracked inputs, position-aligned with the grads the
    /// backward closure returns; `None` marks an untracked input.
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    /// Present on leaves: where to deposit the final gradient.
    leaf: Option<Rc<TensorData>>,
    len: usize,
}

struct TapeInner {
    nodes: Vec<Node>,
    check_finite: bool,
    consumed: bool,
}

/// Recording context for one forward/backward pass. Cheap to clone (shared
/// handle). Single-threaded; use one tape per thread.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                check_finite: false,
                consumed: false,
            })),
        }
    }

    /// Scan every op output for NaN/Inf and fail with
    /// [`AdError::NonFiniteDetected`]. Debug aid; off by default.
    pub fn enable_finite_checks(&self) {
        self.inner.borrow_mut().check_finite = true;
    }

    /// Create a differentiable leaf holding a copy of `values`.
    pub fn leaf(&self, values: Vec<Real>, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "leaf values do not fill the shape"
        );
        let data = Rc::new(TensorData {
            shape,
            values,
            grad: RefCell::new(None),
        });
        let id = {
            let mut inner = self.inner.borrow_mut();
            assert!(!inner.consumed, "tape already consumed by backward");
            inner.nodes.push(Node {
                parents: Vec::new(),
                backward: None,
                leaf: Some(data.clone()),
                len: data.values.len(),
            });
            inner.nodes.len() - 1
        };
        Tensor {
            data,
            track: Some((self.clone(), id)),
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Dense row-major tensor, optionally tracked on a tape.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<TensorData>,
    track: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.data.shape)
            .field("tracked", &self.track.is_some())
            .finish()
    }
}

impl Tensor {
    /// Untracked constant tensor.
    pub fn from_vec(values: Vec<Real>, shape: Vec<usize>) -> Self {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "values do not fill the shape"
        );
        Self {
            data: Rc::new(TensorData {
                shape,
                values,
                grad: RefCell::new(None),
            }),
            track: None,
        }
    }

    pub fn scalar(x: Real) -> Self {
        Self::from_vec(vec![x], vec![])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_vec(vec![0.0; n], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.data.shape
    }

    pub fn values(&self) -> &[Real] {
        &self.data.values
    }

    pub fn numel(&self) -> usize {
        self.data.values.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.track.is_some()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() needs a one-element tensor");
        self.data.values[0]
    }

    /// Gradient accumulated by the last `backward`, if this is a leaf that
    /// received one.
    pub fn grad(&self) -> Option<Vec<Real>> {
        self.data.grad.borrow().clone()
    }

    /// Run reverse-mode accumulation from this scalar. Populates `grad` on
    /// every reachable leaf and consumes the tape.
    pub fn backward(&self) -> AdResult<()> {
        let (tape, loss_id) = self.track.as_ref().ok_or(AdError::NoTape)?;
        if self.numel() != 1 {
            return Err(AdError::NotScalar(self.data.shape.clone()));
        }
        let nodes = {
            let mut inner = tape.inner.borrow_mut();
            inner.consumed = true;
            std::mem::take(&mut inner.nodes)
        };
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; nodes.len()];
        grads[*loss_id] = Some(vec![1.0]);
        for id in (0..=*loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            debug_assert_eq!(g.len(), node.len);
            if let Some(leaf) = &node.leaf {
                let mut slot = leaf.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g),
                }
                continue;
            }
            let backward = node.backward.as_ref().expect("non-leaf node has backward");
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else { continue };
                match grads[*pid].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    None => grads[*pid] = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn node_on(&self, tape: &Tape) -> Option<usize> {
        match &self.track {
            Some((t, id)) if t.same_tape(tape) => Some(*id),
            Some(_) => panic!("inputs recorded on different tapes"),
            None => None,
        }
    }
}

/// Record the output of an op over `inputs`, attaching a backward closure
/// when any input is tracked. `build_backward` receives the per-input
/// "gradient needed" flags.
pub(crate) fn make_output(
    op: &'static str,
    inputs: &[&Tensor],
    values: Vec<Real>,
    shape: Vec<usize>,
    build_backward: impl FnOnce(&[bool]) -> BackwardFn,
) -> AdResult<Tensor> {
    debug_assert_eq!(values.len(), shape.iter().product::<usize>());
    let tape = inputs
        .iter()
        .find_map(|t| t.track.as_ref().map(|(tp, _)| tp.clone()));

    if let Some(tape) = &tape {
        if tape.inner.borrow().check_finite && values.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteDetected(op));
        }
    }

    let data = Rc::new(TensorData {
        shape,
        values,
        grad: RefCell::new(None),
    });
    let Some(tape) = tape else {
        return Ok(Tensor { data, track: None });
    };

    let parents: Vec<Option<usize>> = inputs.iter().map(|t| t.node_on(&tape)).collect();
    let needs: Vec<bool> = parents.iter().map(|p| p.is_some()).collect();
    let backward = build_backward(&needs);
    let id = {
        let mut inner = tape.inner.borrow_mut();
        assert!(!inner.consumed, "tape already consumed by backward");
        inner.nodes.push(Node {
            parents,
            backward: Some(backward),
            leaf: None,
            len: data.values.len(),
        });
        inner.nodes.len() - 1
    };
    Ok(Tensor {
        data,
        track: Some((tape, id)),
    })
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
