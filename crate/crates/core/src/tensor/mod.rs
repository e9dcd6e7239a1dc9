//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional link into the
//! differentiation graph. Operations on tracked tensors record a backward
//! closure; [`backward`] walks the recorded graph in reverse topological
//! order and returns a [`GradientMap`] keyed by parameter.
//!
//! [`Tensor::stop_gradient`] produces a *barrier* node: its forward value is
//! the input (sharing the same buffer), it stays visible to graph traversal
//! so audits can see it, but it never propagates a gradient.
//!
//! Graph lifetime: [`backward`] consumes the graph it walks (every visited
//! node drops its backward closure and parent links). Use
//! [`backward_with`] and [`BackwardOptions::retain_graph`] to keep it.

mod autograd;
pub mod gemm;
mod gradcheck;
pub mod io;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

pub use autograd::{
    backward, backward_with, graph_reachability, BackwardOptions, GradEntry, GradientMap,
    Reachability,
};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_smooth, relative_error, relu_pattern, GradCheckReport, GradCheckStatus, REL_ERR_FLOOR,
};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("cross entropy: every position carries the ignore index")]
    EmptyLoss,
    #[error("label {label} at position {position} is out of range for {classes} classes")]
    LabelOutOfRange {
        label: usize,
        position: usize,
        classes: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tensor #{0} is not a parameter leaf")]
    NotLeaf(u64),
    #[error("backward: graph was already consumed by an earlier backward pass")]
    GraphConsumed,
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Identifier of a trainable leaf. Assigned by the owner of the parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct GradFn {
    pub(crate) parents: Vec<Tensor>,
    /// `None` marks a stop-gradient barrier.
    pub(crate) backward: Option<BackwardFn>,
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) tracked: bool,
    pub(crate) barrier: bool,
    pub(crate) param: Option<ParamId>,
    pub(crate) grad_fn: Mutex<Option<GradFn>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any differentiation graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("id", &self.0.id).field("shape", &self.0.shape);
        if self.numel() <= 16 {
            d.field("data", &self.data());
        }
        d.field("requires_grad", &self.0.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        tracked: bool,
        barrier: bool,
        param: Option<ParamId>,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            tracked,
            barrier,
            param,
            grad_fn: Mutex::new(grad_fn),
        }))
    }

    /// A constant (untracked) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(invalid("new", format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(invalid(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, false, false, None, None))
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![], Arc::new(vec![value]), false, false, false, None, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::build(shape.to_vec(), Arc::new(vec![0.0; numel_of(shape)]), false, false, false, None, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel_of(shape)]), false, false, false, None, None)
    }

    /// A trainable leaf tagged with `id`.
    pub fn parameter(shape: &[usize], data: Vec<f64>, id: ParamId) -> Result<Tensor> {
        let t = Self::new(shape, data)?;
        Ok(t.into_parameter(id))
    }

    /// Re-wraps this tensor's value as a fresh trainable leaf.
    pub fn into_parameter(self, id: ParamId) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, true, false, Some(id), None)
    }

    /// A plain leaf that records gradients but belongs to no parameter set.
    /// Useful for gradient checks on free inputs.
    pub fn variable(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Ok(Self::new(shape, data)?.into_parameter(ParamId(usize::MAX)))
    }

    /// Same values, no graph link.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, false, false, None, None)
    }

    /// Records an operation result. `backward` maps the output gradient to one
    /// optional gradient per parent, in parent order.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Tensor {
        let recording = grad_enabled();
        let tracked = recording && parents.iter().any(|p| p.0.tracked);
        if !tracked {
            return Self::build(shape, Arc::new(data), false, false, false, None, None);
        }
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Self::build(
            shape,
            Arc::new(data),
            requires_grad,
            true,
            false,
            None,
            Some(GradFn {
                parents,
                backward: Some(Box::new(backward)),
            }),
        )
    }

    /// Shares the input buffer under a new shape; gradient is reshaped back.
    pub(crate) fn view_op(&self, shape: Vec<usize>) -> Tensor {
        let recording = grad_enabled() && self.0.tracked;
        if !recording {
            return Self::build(shape, self.0.data.clone(), false, false, false, None, None);
        }
        Self::build(
            shape,
            self.0.data.clone(),
            self.0.requires_grad,
            true,
            false,
            None,
            Some(GradFn {
                parents: vec![self.clone()],
                backward: Some(Box::new(|g| vec![Some(g.to_vec())])),
            }),
        )
    }

    /// Identity forward; contributes exactly zero gradient to its input.
    pub fn stop_gradient(&self) -> Tensor {
        let recording = grad_enabled() && self.0.tracked;
        if !recording {
            return self.detach();
        }
        Self::build(
            self.0.shape.clone(),
            self.0.data.clone(),
            false,
            true,
            true,
            None,
            Some(GradFn {
                parents: vec![self.clone()],
                backward: None,
            }),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    pub fn is_barrier(&self) -> bool {
        self.0.barrier
    }

    pub fn param_id(&self) -> Option<ParamId> {
        self.0.param
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// True when both handles point at the same buffer.
    pub fn shares_data(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0.data, &other.0.data)
    }

    pub(crate) fn grad_fn(&self) -> MutexGuard<'_, Option<GradFn>> {
        self.0.grad_fn.lock().unwrap_or_else(|e| e.into_inner())
    }
}
