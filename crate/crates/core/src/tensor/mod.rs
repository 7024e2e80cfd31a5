//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap handle to an immutable node. Ops allocate a fresh
//! output node that remembers its parents and a backward closure whenever any
//! parent tracks gradients. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates into the `grad` buffer of every tracked
//! leaf.
//!
//! Every op checks its output for NaN/Inf and returns
//! [`TensorError::NonFinite`] instead of propagating it.

mod conv;
mod gradcheck;
mod io;
mod nn;
mod ops;

pub use conv::{conv2d, Conv2dParams};
pub use gradcheck::{gradcheck, CoordMismatch, GradcheckOptions, GradcheckReport};
pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, TENSOR_MAGIC};
pub use nn::{Linear, Parameterized};
pub(crate) use ops::stable_sigmoid;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Maps the upstream gradient of a node to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("dimensions must be positive, got {shape:?}"),
        });
    }
    if numel(shape) != len {
        return Err(TensorError::Invalid {
            op,
            msg: format!("shape {shape:?} needs {} values, got {len}", numel(shape)),
        });
    }
    Ok(())
}

impl Tensor {
    /// Untracked tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape("new", shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Leaf that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape("param", shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "param" });
        }
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid shape {shape:?}"
        );
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        let grad = if requires_grad {
            Some(vec![0.0; data.len()])
        } else {
            None
        };
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(grad),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Builds an op output. Parents that do not track gradients are dropped
    /// together with the closure when nothing upstream needs a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: shape/data mismatch");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            parents,
            backward,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.lock().expect("grad lock poisoned").as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copy of the values without graph history.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Copy of the values as a fresh tracked leaf.
    pub fn to_param(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), true)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(upstream) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if node.0.requires_grad {
                        let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                        let acc = slot.get_or_insert_with(|| vec![0.0; upstream.len()]);
                        for (a, g) in acc.iter_mut().zip(&upstream) {
                            *a += g;
                        }
                    }
                }
                Some(backward) => {
                    let parent_grads = backward(&upstream);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, grad) in node.0.parents.iter().zip(parent_grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), parent.numel());
                        match pending.get_mut(&parent.key()) {
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&grad) {
                                    *a += g;
                                }
                            }
                            None => {
                                pending.insert(parent.key(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes: parents precede children.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
        assert!(Tensor::new(vec![f64::NAN], &[1]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_twice_input() {
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // loss = sum(x*x + 3x) -> 2x + 3
        let x = Tensor::param(vec![0.5, -1.0], &[2]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = x.scale(3.0).unwrap();
        a.add(&b).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 1.0]);
    }

    #[test]
    fn untracked_ops_keep_no_history() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.exp().unwrap();
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }
}
