//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! Every op output keeps handles to its inputs plus a closure mapping the
//! output gradient to input gradients. [`Tensor::backward`] walks that
//! graph in reverse topological order and accumulates into the gradient
//! cells of leaves that require grad. Values are immutable once created;
//! trainable weights live in [`Param`] and are swapped wholesale by the
//! optimizer.

mod adam;
mod conv;
mod direct;
mod gradcheck;
mod loss;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::scalar::Scalar;

pub use adam::{adam_step, AdamState};
pub use conv::{conv3d, conv3d_transpose, downsample_conv, ConvGeometry};
pub use gradcheck::grad_check;
pub use loss::{soft_dice_loss, softmax_cross_entropy, weighted_bce, DICE_EPS};
pub use ops::{
    add, add_residual, concat_channels, global_avg_pool, instance_norm, linear, mean, mul,
    prelu, scale, sigmoid, softmax, sum, INSTANCE_NORM_EPS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

type GradCell<T> = Arc<Mutex<Option<Vec<T>>>>;

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents require grad; others may be skipped.
type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<GradCell<T>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    op: &'static str,
}

/// Shared handle to an immutable tensor value and its place in the graph.
#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.node.op)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<(), TensorError> {
    let n: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) || n != len {
        return Err(mismatch(
            "tensor",
            format!("shape {shape:?} does not describe {len} values"),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn leaf_node(shape: Vec<usize>, data: Arc<Vec<T>>, grad: Option<GradCell<T>>) -> Self {
        Tensor {
            node: Arc::new(Node {
                requires_grad: grad.is_some(),
                shape,
                data,
                grad,
                parents: Vec::new(),
                backward: None,
                op: "leaf",
            }),
        }
    }

    /// Constant tensor; never receives gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        check_len(shape, data.len())?;
        Ok(Self::leaf_node(shape.to_vec(), Arc::new(data), None))
    }

    /// Leaf that accumulates `∂loss/∂self` on [`Tensor::backward`].
    pub fn leaf(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        check_len(shape, data.len())?;
        Ok(Self::leaf_node(
            shape.to_vec(),
            Arc::new(data),
            Some(Arc::new(Mutex::new(None))),
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); n]).expect("positive shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf_node(vec![1], Arc::new(vec![v]), None)
    }

    /// Output of a differentiable op. Parents that do not require grad are
    /// dropped from the graph; if none do, the closure is discarded too.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Result<Self, TensorError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op));
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (Vec<_>, Option<BackwardFn<T>>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor {
            node: Arc::new(Node {
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: None,
                parents,
                backward,
                op,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been written.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.as_ref().and_then(|g| g.lock().unwrap().clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.node.grad {
            *g.lock().unwrap() = None;
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf_node(self.node.shape.clone(), self.data_arc(), None)
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        check_len(shape, self.numel())?;
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        )
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.node) as usize
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into leaves;
    /// call [`Tensor::zero_grad`] / [`Param::zero_grad`] between steps.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS restricted to grad-requiring nodes.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((t, next)) = stack.pop() {
            if next < t.node.parents.len() {
                let parent = t.node.parents[next].clone();
                stack.push((t, next + 1));
                if parent.requires_grad() && visited.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            if let Some(cell) = &t.node.grad {
                let mut slot = cell.lock().unwrap();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(bw) = &t.node.backward {
                let needs: Vec<bool> = t.node.parents.iter().map(|p| p.requires_grad()).collect();
                let parent_grads = bw(&g, &needs);
                debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "grad size from {}", t.node.op);
                    match grads.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            grads.insert(p.key(), pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Named trainable weight. Each forward pass takes a fresh leaf view of the
/// current value via [`Param::tensor`]; those leaves share this param's
/// gradient cell.
#[derive(Clone)]
pub struct Param<T: Scalar = f32> {
    inner: Arc<ParamInner<T>>,
}

struct ParamInner<T: Scalar> {
    name: String,
    shape: Vec<usize>,
    value: RwLock<Arc<Vec<T>>>,
    grad: GradCell<T>,
}

impl<T: Scalar> fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Param({}, {:?})", self.inner.name, self.inner.shape)
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Result<Self, TensorError> {
        check_len(shape, value.len())?;
        Ok(Param {
            inner: Arc::new(ParamInner {
                name: name.into(),
                shape: shape.to_vec(),
                value: RwLock::new(Arc::new(value)),
                grad: Arc::new(Mutex::new(None)),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn value(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.value.read().unwrap())
    }

    pub fn set_value(&self, value: Vec<T>) -> Result<(), TensorError> {
        if value.len() != self.numel() {
            return Err(mismatch(
                "param",
                format!("{}: {} values for shape {:?}", self.name(), value.len(), self.shape()),
            ));
        }
        *self.inner.value.write().unwrap() = Arc::new(value);
        Ok(())
    }

    /// Leaf view that feeds gradients back into this param.
    pub fn tensor(&self) -> Tensor<T> {
        Tensor::leaf_node(
            self.inner.shape.clone(),
            self.value(),
            Some(Arc::clone(&self.inner.grad)),
        )
    }

    /// Constant view for inference.
    pub fn constant(&self) -> Tensor<T> {
        Tensor::leaf_node(self.inner.shape.clone(), self.value(), None)
    }

    /// View that tracks gradients only when `track` is set.
    pub fn view(&self, track: bool) -> Tensor<T> {
        if track {
            self.tensor()
        } else {
            self.constant()
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }
}
