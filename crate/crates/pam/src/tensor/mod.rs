//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are rank-2 `(batch, feature)` or rank-4 `(batch, channel, height,
//! width)` arrays of `f64` in row-major layout. Every differentiable primitive
//! records a backward closure; calling [`Tensor::backward`] on a scalar walks
//! the graph in reverse topological order and accumulates gradients into the
//! `requires_grad` leaves. Repeated backward calls accumulate additively until
//! [`Tensor::zero_grad`] resets them.

mod conv;
mod gradcheck;
mod norm;
mod ops;

pub use conv::{conv2d, ConvSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use norm::{batch_norm, prelu, BatchNormState, Mode};
pub use ops::{
    add, affine, cross_entropy_mean, global_pool, l2_normalize, mul, relu, scale_per_sample,
    sigmoid, sum, PoolKind,
};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

struct Node {
    inner: RefCell<Inner>,
    /// Upstream tensors, used only for the topological walk.
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Handle to a node in the differentiation graph. Cloning is shallow.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.node.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn check_shape_data(shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} implies {n} elements but data has {}",
            data.len()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape_data(shape, &data)?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1, 1], vec![value], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                inner: RefCell::new(Inner { shape, data, grad: None, requires_grad }),
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// Marks this leaf as trainable. Returns self for chaining.
    pub fn requires_grad(self) -> Tensor {
        self.node.inner.borrow_mut().requires_grad = true;
        self
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Result<Tensor> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "primitive produced {} at flat index {i}",
                data[i]
            )));
        }
        let requires_grad = parents.iter().any(|p| p.is_requires_grad());
        Ok(Tensor {
            node: Rc::new(Node {
                inner: RefCell::new(Inner { shape, data, grad: None, requires_grad }),
                parents,
                backward_fn: if requires_grad { Some(backward_fn) } else { None },
            }),
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.node.inner.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.node.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_requires_grad(&self) -> bool {
        self.node.inner.borrow().requires_grad
    }

    /// Borrow of the raw values. Keep the borrow short-lived.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.node.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.inner.borrow().data.clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn value(&self) -> f64 {
        let inner = self.node.inner.borrow();
        assert_eq!(inner.data.len(), 1, "value() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.inner.borrow_mut().grad = None;
    }

    /// Overwrites one element in place. Only valid on leaves; any graph built
    /// from the old value is stale afterwards.
    pub fn set_elem(&self, idx: usize, value: f64) {
        self.node.inner.borrow_mut().data[idx] = value;
    }

    /// In-place SGD-style update on a leaf: data += scale * delta.
    pub fn add_scaled(&self, delta: &[f64], scale: f64) {
        let mut inner = self.node.inner.borrow_mut();
        assert_eq!(inner.data.len(), delta.len());
        for (d, &g) in inner.data.iter_mut().zip(delta) {
            *d += scale * g;
        }
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.node.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data.copy_from_slice(data);
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.node.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        debug_assert_eq!(grad.len(), g.len());
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn node_id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into all
    /// reachable `requires_grad` tensors.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        // Topological order by iterative post-order DFS.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.is_requires_grad() && !visited.contains(&p.node_id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        // Local gradient buffers keyed by node; seeded at the output.
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            if let Some(f) = &t.node.backward_fn {
                let g = {
                    let inner = t.node.inner.borrow();
                    match &inner.grad {
                        Some(g) => g.clone(),
                        None => continue,
                    }
                };
                f(&g);
                // Intermediate grads are scratch space for the sweep.
                if t.node.backward_fn.is_some() && t.node_id() != self.node_id() {
                    t.node.inner.borrow_mut().grad = None;
                }
            }
        }
        Ok(())
    }
}
