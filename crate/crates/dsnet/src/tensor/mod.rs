//! Minimal reverse-mode autodiff over `ndarray`, double precision only.
//!
//! Every tensor wraps an `ArrayD<f64>` plus an optional backward op linking it
//! to its inputs. Calling [`Tensor::backward`] on a scalar walks the recorded
//! graph in reverse topological order and accumulates gradients into every
//! reachable tensor that `requires_grad`. Ops that see only constant inputs
//! record nothing, so inference builds no graph.
//!
//! All ops are single-threaded and evaluate in a fixed order, which makes
//! whole-training-run traces bit-for-bit reproducible for a fixed seed.

mod conv;
mod loss;
mod pool;
mod resize;

pub use conv::Padding;
pub use pool::partition;
pub use resize::bilinear_weights;

use ndarray::{ArrayD, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

/// One gradient contribution flowing to a parent tensor.
pub(crate) type GradPair = (Tensor, ArrayD<f64>);

pub(crate) trait BackwardOp {
    /// Tensors this op reads; used for the topological walk.
    fn parents(&self) -> Vec<Tensor>;
    /// Given the gradient of the loss w.r.t. this op's output, produce the
    /// gradient contributions for each parent that requires one.
    fn backward(&self, grad_out: &ArrayD<f64>) -> Vec<GradPair>;
}

pub(crate) struct Inner {
    id: usize,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    op: Option<Box<dyn BackwardOp>>,
}

/// A reference-counted node in the autodiff graph.
///
/// Cloning is cheap and aliases the same storage; the optimizer relies on
/// this to mutate parameters in place between iterations.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(data: ArrayD<f64>, requires_grad: bool, op: Option<Box<dyn BackwardOp>>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub(crate) fn from_op(data: ArrayD<f64>, op: Box<dyn BackwardOp>) -> Tensor {
        let requires = op.parents().iter().any(|p| p.requires_grad());
        if requires {
            Tensor::new(data, true, Some(op))
        } else {
            Tensor::new(data, false, None)
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor::new(data, false, None)
    }

    /// Leaf tensor that accumulates gradients; model parameters and probe
    /// inputs are built this way.
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor::new(data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Constant tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Option<Tensor> {
        ArrayD::from_shape_vec(IxDyn(shape), data).ok().map(Tensor::constant)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.data.borrow().shape().to_vec()
    }

    /// Shape as (batch, channels, height, width). Panics off 4-d data.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let d = self.inner.data.borrow();
        let s = d.shape();
        assert_eq!(s.len(), 4, "expected 4-d tensor, got shape {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        *d.iter().next().unwrap()
    }

    /// Replace the stored values. Only meaningful on leaves (parameters);
    /// interior nodes would go stale the next forward pass anyway.
    pub fn set_data(&self, data: ArrayD<f64>) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.shape(), data.shape(), "set_data shape mismatch");
        *d = data;
    }

    /// In-place SGD-style update `data -= step`.
    pub fn sub_assign(&self, step: &ArrayD<f64>) {
        let mut d = self.inner.data.borrow_mut();
        *d -= step;
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep seeded with ones (call on a scalar loss).
    pub fn backward(&self) {
        let seed = ArrayD::ones(IxDyn(&self.shape()));
        self.backward_with(seed);
    }

    /// Reverse-mode sweep with an explicit seed gradient, e.g. a one-hot
    /// pixel for impulse-response probes.
    pub fn backward_with(&self, seed: ArrayD<f64>) {
        assert!(self.requires_grad(), "backward on non-grad tensor");
        // Topological order via iterative DFS.
        let mut order: Vec<Tensor> = Vec::new();
        let mut state: HashMap<usize, u8> = HashMap::new(); // 1 = visiting, 2 = done
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, processed)) = stack.pop() {
            if processed {
                state.insert(node.id(), 2);
                order.push(node);
                continue;
            }
            match state.get(&node.id()) {
                Some(_) => continue,
                None => {
                    state.insert(node.id(), 1);
                    stack.push((node.clone(), true));
                    if let Some(op) = &node.inner.op {
                        for p in op.parents() {
                            if p.requires_grad() && !state.contains_key(&p.id()) {
                                stack.push((p, false));
                            }
                        }
                    }
                }
            }
        }
        self.accumulate_grad(seed);
        for node in order.iter().rev() {
            let Some(op) = &node.inner.op else { continue };
            let grad_out = {
                let slot = node.inner.grad.borrow();
                match slot.as_ref() {
                    Some(g) => g.clone(),
                    None => continue, // not on any path to the seed
                }
            };
            for (parent, contribution) in op.backward(&grad_out) {
                if parent.requires_grad() {
                    parent.accumulate_grad(contribution);
                }
            }
            // Interior activations never feed an optimizer; drop their grads
            // once consumed so memory stays bounded by the parameter set.
            if node.inner.op.is_some() && node.id() != self.id() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

struct AddBackward {
    a: Tensor,
    b: Tensor,
}

impl BackwardOp for AddBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        vec![(self.a.clone(), g.clone()), (self.b.clone(), g.clone())]
    }
}

struct MulBackward {
    a: Tensor,
    b: Tensor,
}

impl BackwardOp for MulBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let da = g * &*self.b.data();
        let db = g * &*self.a.data();
        vec![(self.a.clone(), da), (self.b.clone(), db)]
    }
}

/// y = scale * x + shift
struct AffineBackward {
    x: Tensor,
    scale: f64,
}

impl BackwardOp for AffineBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        vec![(self.x.clone(), g * self.scale)]
    }
}

struct ReluBackward {
    x: Tensor,
}

impl BackwardOp for ReluBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let x = self.x.data();
        let mut dx = g.clone();
        dx.zip_mut_with(&x, |gv, xv| {
            if *xv <= 0.0 {
                *gv = 0.0;
            }
        });
        vec![(self.x.clone(), dx)]
    }
}

struct SigmoidBackward {
    x: Tensor,
    y: ArrayD<f64>,
}

impl BackwardOp for SigmoidBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let mut dx = g.clone();
        dx.zip_mut_with(&self.y, |gv, yv| *gv *= yv * (1.0 - yv));
        vec![(self.x.clone(), dx)]
    }
}

struct SumBackward {
    x: Tensor,
}

impl BackwardOp for SumBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let gv = g.iter().next().copied().unwrap_or(0.0);
        let dx = ArrayD::from_elem(self.x.data().raw_dim(), gv);
        vec![(self.x.clone(), dx)]
    }
}

struct ConcatBackward {
    parts: Vec<Tensor>,
    axis: usize,
}

impl BackwardOp for ConcatBackward {
    fn parents(&self) -> Vec<Tensor> {
        self.parts.clone()
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let mut out = Vec::with_capacity(self.parts.len());
        let mut offset = 0usize;
        for p in &self.parts {
            let len = p.data().shape()[self.axis];
            let slice = g
                .slice_axis(ndarray::Axis(self.axis), ndarray::Slice::from(offset..offset + len))
                .to_owned();
            out.push((p.clone(), slice));
            offset += len;
        }
        out
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = &*self.data() + &*other.data();
        Tensor::from_op(
            data,
            Box::new(AddBackward {
                a: self.clone(),
                b: other.clone(),
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let data = &*self.data() * &*other.data();
        Tensor::from_op(
            data,
            Box::new(MulBackward {
                a: self.clone(),
                b: other.clone(),
            }),
        )
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let data = self.data().mapv(|v| scale * v + shift);
        Tensor::from_op(
            data,
            Box::new(AffineBackward {
                x: self.clone(),
                scale,
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.add(&other.affine(-1.0, 0.0))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().mapv(|v| v.max(0.0));
        Tensor::from_op(data, Box::new(ReluBackward { x: self.clone() }))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        Tensor::from_op(
            data.clone(),
            Box::new(SigmoidBackward {
                x: self.clone(),
                y: data,
            }),
        )
    }

    /// Sum of all elements as a 1-element tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Box::new(SumBackward { x: self.clone() }),
        )
    }

    /// Concatenate along the channel axis (axis 1 of NCHW).
    pub fn concat_channels(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let data = ndarray::concatenate(ndarray::Axis(1), &view_refs)
            .expect("concat_channels: incompatible shapes");
        Tensor::from_op(
            data,
            Box::new(ConcatBackward {
                parts: parts.to_vec(),
                axis: 1,
            }),
        )
    }
}
