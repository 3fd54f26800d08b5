//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a shape plus a flat row-major buffer. Differentiable
//! operations record their inputs and a backward closure on the result, so
//! a computation implicitly builds a DAG ("tape"). Calling
//! [`Tensor::backward`] on a scalar walks that DAG in reverse topological
//! order and accumulates `d(scalar)/d(node)` into every node that
//! participates in differentiation.
//!
//! Design points:
//!
//! * **f64 everywhere.** The models in this crate are desk-scale; double
//!   precision makes finite-difference gradient checking meaningful down to
//!   ~1e-10 relative error and removes a whole class of tolerance tuning.
//! * **Handles are cheap.** `Tensor` is a reference-counted handle; cloning
//!   shares the buffer. The tape is confined to one thread (`Rc`, not
//!   `Arc`) — data parallelism, if ever wanted, is per-thread tapes.
//! * **Gradients accumulate.** A node consumed twice receives the sum of
//!   both contributions, so backward of a sum of losses equals the sum of
//!   individual backwards.
//! * **Instrumented compute.** Matrix-multiply-like kernels count
//!   multiply-accumulate operations into a thread-local counter (see
//!   [`mac_count`]), which is how tests verify that sparse expert dispatch
//!   does constant work per token regardless of the expert count.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod ops;
pub mod rng;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Total multiply-accumulate operations executed by matmul/conv kernels on
/// this thread since the last [`reset_mac_count`].
pub fn mac_count() -> u64 {
    MACS.with(|c| c.get())
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

pub(crate) fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: receives the output node, reads its gradient, and
/// accumulates contributions into the node's parents.
type BackwardFn = Box<dyn Fn(&Tensor)>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// A dense f64 tensor participating in reverse-mode differentiation.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Dimension {
            op: "tensor",
            msg: format!("shape {shape:?} implies {numel} elements, data has {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// A constant (non-differentiable) tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::new(shape.to_vec(), data, false))
    }

    /// A trainable leaf from a flat row-major buffer.
    pub fn param_from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::new(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value], false)
    }

    /// The n×n identity matrix (handy for attention tests).
    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], data, false)
    }

    /// A trainable leaf initialized uniformly in `±1/sqrt(fan_in)`, the
    /// crate-wide init for linear maps.
    pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut rng::RngStream) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.range(-bound, bound)).collect();
        Tensor::new(shape.to_vec(), data, true)
    }

    /// Result of a differentiable operation. If no parent participates in
    /// differentiation the graph edges are dropped and the result is a
    /// plain constant, which keeps inference cheap.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = parents.iter().any(|p| p.requires_grad());
        if !tracked {
            return Tensor::new(shape, data, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward_fn: Some(backward_fn),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for leaves created directly (parameters, constants) rather
    /// than op results.
    pub fn is_leaf(&self) -> bool {
        self.inner.backward_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Intended for optimizer updates
    /// and finite-difference probes on leaves; mutating an op result
    /// invalidates gradients already recorded downstream.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Adds `delta` into this node's gradient buffer, allocating zeros on
    /// first use.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Reverse-mode differentiation from this scalar. After the call,
    /// every tensor on the tape that requires grad holds d(self)/d(tensor)
    /// (summed with whatever its gradient buffer already held, so call
    /// [`Tensor::zero_grad`] on leaves between steps).
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward requires a scalar loss");
        assert!(
            self.requires_grad(),
            "backward on a constant: nothing on the tape depends on it"
        );
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(f) = &node.inner.backward_fn {
                let has_grad = node.inner.grad.borrow().is_some();
                if has_grad {
                    f(node);
                }
            }
        }
    }

    /// Post-order (parents before children) over the sub-DAG that
    /// participates in differentiation. Iterative: graphs from unrolled
    /// recurrences get deep enough to overflow a test thread's stack.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        visited.insert(self.id());
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.inner.parents.len() {
                let parent = node.inner.parents[cursor].clone();
                stack.push((node, cursor + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
