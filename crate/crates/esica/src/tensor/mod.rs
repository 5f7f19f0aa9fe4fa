//! Dense f64 tensors with reverse-mode differentiation over a closed op set.
//!
//! Tensors are immutable values: every op returns a fresh tensor and records
//! the backward function needed to propagate gradients to any parent that
//! requires them. Calling [`Tensor::backward`] on a scalar walks the recorded
//! graph and returns a [`Gradients`] map keyed by leaf tensor identity.
//!
//! All values are checked for finiteness as they are produced; a NaN or Inf
//! is an error, never a state the graph can silently carry.

pub mod conv;
mod gradcheck;
mod ops;
pub(crate) mod resize;

pub use conv::Axis;
pub use gradcheck::grad_check;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule recorded by a differentiable op.
///
/// `backward` receives the gradient flowing into the op's output and returns
/// one gradient buffer per parent, aligned with `parents()`. A `None` entry
/// means the parent does not require a gradient and none was computed.
pub(crate) trait GradFn: Send + Sync {
    fn parents(&self) -> &[Tensor];
    fn backward(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// Dense N-dimensional array of f64 values, row-major.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Leaf tensor that does not track gradients.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        check_finite("new", &data)?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::leaf(t.inner.shape.clone(), t.inner.data.clone(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Standard-normal leaf scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| sample_normal(rng) * std).collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad_fn: None,
            }),
        }
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        grad_fn: Box<dyn GradFn>,
    ) -> Result<Self> {
        check_finite(op, &data)?;
        let requires_grad = grad_fn.parents().iter().any(|p| p.requires_grad());
        let grad_fn = if requires_grad { Some(grad_fn) } else { None };
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad_fn,
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Copy of this tensor detached from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    /// Copy of this tensor as a gradient-tracking leaf.
    pub fn as_param(&self) -> Tensor {
        Self::leaf(self.inner.shape.clone(), self.inner.data.clone(), true)
    }

    /// Reverse-mode sweep from a scalar. Returns gradients for every
    /// gradient-requiring leaf reachable from this tensor.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() requires a scalar, got shape {:?}",
                self.shape()
            )));
        }

        // Collect the reachable subgraph. Ids increase monotonically from
        // parents to children, so descending id order is a topological order.
        let mut nodes: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || nodes.contains_key(&t.id()) {
                continue;
            }
            if let Some(fun) = &t.inner.grad_fn {
                for p in fun.parents() {
                    if p.requires_grad() && !nodes.contains_key(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.insert(t.id(), t);
        }

        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        let mut leaf_grads: HashMap<u64, Vec<f64>> = HashMap::new();
        for id in order {
            let Some(grad) = grads.remove(&id) else {
                continue;
            };
            let node = &nodes[&id];
            match &node.inner.grad_fn {
                None => {
                    leaf_grads.insert(id, grad);
                }
                Some(fun) => {
                    let parent_grads = fun.backward(&grad);
                    for (parent, pg) in fun.parents().iter().zip(parent_grads) {
                        let (Some(pg), true) = (pg, parent.requires_grad()) else {
                            continue;
                        };
                        check_finite("backward", &pg)?;
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_id: leaf_grads })
    }
}

/// Gradients of a scalar with respect to leaf tensors, keyed by tensor identity.
pub struct Gradients {
    by_id: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_id.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient as a tensor of the same shape as `t`.
    pub fn tensor(&self, t: &Tensor) -> Option<Tensor> {
        self.by_id
            .get(&t.id())
            .map(|v| Tensor::leaf(t.shape().to_vec(), v.clone(), false))
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.by_id.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Box-Muller draw; consumes two uniform samples per call.
fn sample_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_an_error() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_input_is_an_error() {
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::param(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let y = x.sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn reused_operand_accumulates() {
        // f(x) = sum(x + x) => grad = 2.
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.add(&x).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn no_grad_paths_record_nothing() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.add(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(y.is_leaf() || y.inner.grad_fn.is_none());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_for(&[5]), vec![1]);
    }
}
