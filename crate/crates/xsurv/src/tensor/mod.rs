//! Reverse-mode differentiable tensor kernels.
//!
//! Tensors are row-major `Vec<E>` buffers wrapped in reference-counted nodes.
//! Each operation computes its output eagerly and records a backward closure,
//! so the tape is rebuilt on every forward pass (define-by-run). Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every `requires_grad`
//! leaf reachable from the loss.
//!
//! The element type is generic: training runs in `f32`, gradient-check suites
//! run the same code in `f64`.

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

mod conv;
mod gradcheck;
mod init;
mod nn;
mod optim;
mod pool;

pub use conv::*;
pub use gradcheck::{
    gradient_check, gradient_check_directional, gradient_check_sampled, GradCheckReport,
};
pub use init::*;
pub use nn::*;
pub use optim::{adam_step, AdamParams, AdamState};

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self;
    fn of_usize(n: usize) -> Self {
        Self::of_f64(n as f64)
    }
}

impl Element for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(v: f32) -> Self {
        v
    }
}

impl Element for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
}

/// Structured error for tensor operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn<E> = Box<dyn Fn(&BackwardCtx<'_, E>)>;

/// Context handed to a backward closure: the upstream gradient, the node's own
/// forward output, and the parent tensors to accumulate into.
pub struct BackwardCtx<'a, E: Element> {
    pub grad: &'a [E],
    pub out_data: &'a [E],
    pub parents: &'a [Tensor<E>],
}

impl<E: Element> BackwardCtx<'_, E> {
    /// Mutable gradient buffer of parent `i`, allocated to zeros on first use.
    /// Returns `None` when that parent does not need a gradient.
    pub fn parent_grad(&self, i: usize) -> Option<RefMut<'_, Vec<E>>> {
        let p = &self.parents[i];
        if !p.node.needs_grad {
            return None;
        }
        Some(p.grad_buf_mut())
    }
}

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

fn next_id() -> u64 {
    use std::cell::Cell;
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// N-dimensional tensor handle; cloning is cheap (reference counted).
pub struct Tensor<E: Element> {
    node: Rc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// Leaf tensor from raw data. Panics if `data.len() != product(shape)`.
    pub fn from_data(shape: &[usize], data: Vec<E>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad: requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_data(shape, vec![E::zero(); shape.iter().product()], false)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor::from_data(shape, vec![v; shape.iter().product()], false)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::from_data(&[1], vec![v], false)
    }

    /// Parameter leaf: requires a gradient.
    pub fn param(shape: &[usize], data: Vec<E>) -> Self {
        Tensor::from_data(shape, data, true)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let needs_grad = parents.iter().any(|p| p.node.needs_grad);
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                needs_grad,
                parents: if needs_grad { parents } else { Vec::new() },
                backward: if needs_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.node.data.borrow()
    }

    /// Mutable access to the raw buffer (optimizer updates, perturbations).
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn grad_buf_mut(&self) -> RefMut<'_, Vec<E>> {
        let mut slot = self.node.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![E::zero(); self.numel()]);
        }
        RefMut::map(slot, |o| o.as_mut().unwrap())
    }

    /// Detached copy: same data, no history, no gradient requirement.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_data(&self.node.shape, self.to_vec(), false)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of `requires_grad`
    /// leaves accumulate across repeated calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.node.shape.clone(),
            });
        }
        if !self.node.needs_grad {
            return Ok(());
        }
        // Iterative DFS postorder over parents; reversed postorder processes
        // every node before any of its inputs.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((node, pi)) = stack.pop() {
            if pi < node.node.parents.len() {
                let parent = node.node.parents[pi].clone();
                stack.push((node, pi + 1));
                if parent.node.needs_grad && visited.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        {
            let mut g = self.grad_buf_mut();
            g[0] += E::one();
        }
        for node in order.iter().rev() {
            let grad = {
                let slot = node.node.grad.borrow();
                match slot.as_ref() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
            if let Some(back) = &node.node.backward {
                let out_data = node.node.data.borrow();
                let ctx = BackwardCtx {
                    grad: &grad,
                    out_data: &out_data,
                    parents: &node.node.parents,
                };
                back(&ctx);
            }
            if !node.node.requires_grad {
                // Intermediate gradients are not retained.
                *node.node.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape)
// ---------------------------------------------------------------------------

fn check_same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                for i in 0..2 {
                    if let Some(mut g) = ctx.parent_grad(i) {
                        for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                            *gp += go;
                        }
                    }
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                        *gp += go;
                    }
                }
                if let Some(mut g) = ctx.parent_grad(1) {
                    for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                        *gp -= go;
                    }
                }
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * b[i];
                    }
                }
                drop(b);
                if let Some(mut g) = ctx.parent_grad(1) {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * a[i];
                    }
                }
            }),
        ))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("div", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a / b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] / b[i];
                    }
                }
                if let Some(mut g) = ctx.parent_grad(1) {
                    for i in 0..g.len() {
                        g[i] -= ctx.grad[i] * a[i] / (b[i] * b[i]);
                    }
                }
            }),
        ))
    }

    // -----------------------------------------------------------------------
    // Scalar ops
    // -----------------------------------------------------------------------

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                        *gp += go;
                    }
                }
            }),
        )
    }

    pub fn mul_scalar(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                        *gp += go * c;
                    }
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor<E> {
        self.mul_scalar(-E::one())
    }

    /// Elementwise power with a constant exponent; subgradient 0 at x == 0.
    pub fn pow_scalar(&self, p: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a.powf(p)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        let d = if x[i] == E::zero() {
                            E::zero()
                        } else {
                            p * x[i].powf(p - E::one())
                        };
                        g[i] += ctx.grad[i] * d;
                    }
                }
            }),
        )
    }

    /// max(x, lo); gradient passes where x > lo.
    pub fn clamp_min(&self, lo: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a.max(lo)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        if x[i] > lo {
                            g[i] += ctx.grad[i];
                        }
                    }
                }
            }),
        )
    }

    /// Clamp into [lo, hi]; gradient passes strictly inside the interval.
    pub fn clamp(&self, lo: E, hi: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a.max(lo).min(hi)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        if x[i] > lo && x[i] < hi {
                            g[i] += ctx.grad[i];
                        }
                    }
                }
            }),
        )
    }

    // -----------------------------------------------------------------------
    // Elementwise unary ops
    // -----------------------------------------------------------------------

    pub fn exp(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&a| a.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * ctx.out_data[i];
                    }
                }
            }),
        )
    }

    pub fn log(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&a| a.ln()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                let x = ctx.parents[0].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] / x[i];
                    }
                }
            }),
        )
    }

    pub fn relu(&self) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&a| if a > E::zero() { a } else { E::zero() })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                let x = ctx.parents[0].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        if x[i] > E::zero() {
                            g[i] += ctx.grad[i];
                        }
                    }
                }
            }),
        )
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&a| if a > E::zero() { a } else { a * slope })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        let d = if x[i] > E::zero() { E::one() } else { slope };
                        g[i] += ctx.grad[i] * d;
                    }
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&a| E::one() / (E::one() + (-a).exp()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        let s = ctx.out_data[i];
                        g[i] += ctx.grad[i] * s * (E::one() - s);
                    }
                }
            }),
        )
    }

    /// tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::of_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = E::of_f64(0.044715);
        let half = E::of_f64(0.5);
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&x| half * x * (E::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let xs = ctx.parents[0].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for i in 0..g.len() {
                        let x = xs[i];
                        let inner = c * (x + k * x * x * x);
                        let t = inner.tanh();
                        let sech2 = E::one() - t * t;
                        let di = c * (E::one() + E::of_f64(3.0) * k * x * x);
                        let d = half * (E::one() + t) + half * x * sech2 * di;
                        g[i] += ctx.grad[i] * d;
                    }
                }
            }),
        )
    }

    // -----------------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------------

    pub fn sum(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(|ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    let go = ctx.grad[0];
                    for gp in g.iter_mut() {
                        *gp += go;
                    }
                }
            }),
        )
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = E::of_usize(self.numel());
        let s: E = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n],
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    let go = ctx.grad[0] / n;
                    for gp in g.iter_mut() {
                        *gp += go;
                    }
                }
            }),
        )
    }

    // -----------------------------------------------------------------------
    // Shape ops
    // -----------------------------------------------------------------------

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = new_shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!(
                    "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                    self.shape(),
                    self.numel(),
                    new_shape,
                    n
                ),
            });
        }
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                        *gp += go;
                    }
                }
            }),
        ))
    }

    /// Permute axes; the output is materialized contiguous.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        if perm.len() != rank || {
            let mut seen = vec![false; rank];
            perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        } {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("invalid permutation {:?} for rank {}", perm, rank),
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_copy(&self.data(), &in_shape, perm);
        let perm_owned = perm.to_vec();
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    // Inverse permutation maps the gradient back.
                    let mut inv = vec![0usize; perm_owned.len()];
                    for (i, &p) in perm_owned.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_copy(ctx.grad, &out_shape, &inv);
                    for (gp, go) in g.iter_mut().zip(back) {
                        *gp += go;
                    }
                }
            }),
        ))
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank,
            });
        }
        if start + len > self.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "range {}..{} out of bounds for axis {} of size {}",
                    start,
                    start + len,
                    axis,
                    self.shape()[axis]
                ),
            });
        }
        let in_shape = self.shape().to_vec();
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let in_axis = in_shape[axis];
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_axis + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for o in 0..outer {
                        let dst = (o * in_axis + start) * inner;
                        let srcb = o * len * inner;
                        for i in 0..len * inner {
                            g[dst + i] += ctx.grad[srcb + i];
                        }
                    }
                }
            }),
        ))
    }
}

/// Concatenate along `axis`. All other axes must match.
pub fn concat<E: Element>(tensors: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if tensors.is_empty() {
        return Err(TensorError::Invalid {
            op: "concat",
            msg: "empty input list".into(),
        });
    }
    let rank = tensors[0].shape().len();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut out_shape = tensors[0].shape().to_vec();
    let mut axis_total = 0;
    for t in tensors {
        for (d, (&a, &b)) in t.shape().iter().zip(&out_shape).enumerate() {
            if d != axis && a != b {
                return Err(TensorError::AxisMismatch {
                    op: "concat",
                    axis: d,
                    expected: b,
                    got: a,
                });
            }
        }
        axis_total += t.shape()[axis];
    }
    out_shape[axis] = axis_total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    let mut data = vec![E::zero(); outer * axis_total * inner];
    let mut offset = 0;
    for (t, &sz) in tensors.iter().zip(&sizes) {
        let src = t.data();
        for o in 0..outer {
            let dst = (o * axis_total + offset) * inner;
            let sb = o * sz * inner;
            data[dst..dst + sz * inner].copy_from_slice(&src[sb..sb + sz * inner]);
        }
        offset += sz;
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        tensors.to_vec(),
        Box::new(move |ctx| {
            let mut offset = 0;
            for (pi, &sz) in sizes.iter().enumerate() {
                if let Some(mut g) = ctx.parent_grad(pi) {
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let db = o * sz * inner;
                        for i in 0..sz * inner {
                            g[db + i] += ctx.grad[src + i];
                        }
                    }
                }
                offset += sz;
            }
        }),
    ))
}

fn permute_copy<E: Element>(data: &[E], in_shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    // Stride in the input for each output axis.
    let strides_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![E::zero(); n];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // Odometer increment over the output shape.
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += strides_for_out[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= strides_for_out[d] * out_shape[d];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matmul and softmax
// ---------------------------------------------------------------------------

/// `[m,k] @ [k,n]` or batched `[b,m,k] @ [b,k,n]`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ba, ma, ka) = match *a.shape() {
        [m, k] => (1, m, k),
        [bt, m, k] => (bt, m, k),
        _ => {
            return Err(TensorError::Invalid {
                op: "matmul",
                msg: format!("lhs must be rank 2 or 3, got {:?}", a.shape()),
            })
        }
    };
    let (bb, kb, nb) = match *b.shape() {
        [k, n] => (1, k, n),
        [bt, k, n] => (bt, k, n),
        _ => {
            return Err(TensorError::Invalid {
                op: "matmul",
                msg: format!("rhs must be rank 2 or 3, got {:?}", b.shape()),
            })
        }
    };
    if ka != kb || ba != bb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (batch, m, k, n) = (ba, ma, ka, nb);
    let data = {
        let av = a.data();
        let bv = b.data();
        matmul_raw(&av, &bv, batch, m, k, n)
    };
    let out_shape = if a.shape().len() == 2 && b.shape().len() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let av = ctx.parents[0].data();
            let bv = ctx.parents[1].data();
            if let Some(mut ga) = ctx.parent_grad(0) {
                // dA = dC @ B^T
                accum_matmul_nt(&mut ga, ctx.grad, &bv, batch, m, n, k);
            }
            if let Some(mut gb) = ctx.parent_grad(1) {
                // dB = A^T @ dC
                accum_matmul_tn(&mut gb, &av, ctx.grad, batch, m, k, n);
            }
        }),
    ))
}

fn matmul_raw<E: Element>(a: &[E], b: &[E], batch: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    use rayon::prelude::*;
    let mut out = vec![E::zero(); batch * m * n];
    let rows: Vec<(usize, &mut [E])> = out.chunks_mut(n).enumerate().collect();
    rows.into_par_iter().for_each(|(row_idx, out_row)| {
        let bt = row_idx / m;
        let i = row_idx % m;
        let a_row = &a[(bt * m + i) * k..(bt * m + i + 1) * k];
        let b_mat = &b[bt * k * n..(bt + 1) * k * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// grad_a[b,m,k] += g[b,m,n] @ b[b,k,n]^T
fn accum_matmul_nt<E: Element>(
    ga: &mut [E],
    g: &[E],
    bm: &[E],
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
) {
    for bt in 0..batch {
        for i in 0..m {
            let g_row = &g[(bt * m + i) * n..(bt * m + i + 1) * n];
            let ga_row = &mut ga[(bt * m + i) * k..(bt * m + i + 1) * k];
            for p in 0..k {
                let b_row = &bm[(bt * k + p) * n..(bt * k + p + 1) * n];
                let mut s = E::zero();
                for j in 0..n {
                    s += g_row[j] * b_row[j];
                }
                ga_row[p] += s;
            }
        }
    }
}

/// grad_b[b,k,n] += a[b,m,k]^T @ g[b,m,n]
fn accum_matmul_tn<E: Element>(
    gb: &mut [E],
    am: &[E],
    g: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for bt in 0..batch {
        for i in 0..m {
            let a_row = &am[(bt * m + i) * k..(bt * m + i + 1) * k];
            let g_row = &g[(bt * m + i) * n..(bt * m + i + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                if av == E::zero() {
                    continue;
                }
                let gb_row = &mut gb[(bt * k + p) * n..(bt * k + p + 1) * n];
                for j in 0..n {
                    gb_row[j] += av * g_row[j];
                }
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let shape = self.shape().to_vec();
        let axis_size = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * axis_size + a) * inner + i;
                let mut mx = src[idx(0)];
                for a in 1..axis_size {
                    mx = mx.max(src[idx(a)]);
                }
                let mut denom = E::zero();
                for a in 0..axis_size {
                    let e = (src[idx(a)] - mx).exp();
                    data[idx(a)] = e;
                    denom += e;
                }
                for a in 0..axis_size {
                    data[idx(a)] = data[idx(a)] / denom;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * axis_size + a) * inner + i;
                            let mut dot = E::zero();
                            for a in 0..axis_size {
                                dot += ctx.grad[idx(a)] * ctx.out_data[idx(a)];
                            }
                            for a in 0..axis_size {
                                let j = idx(a);
                                g[j] += ctx.out_data[j] * (ctx.grad[j] - dot);
                            }
                        }
                    }
                }
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Broadcast helpers used by layers
// ---------------------------------------------------------------------------

impl<E: Element> Tensor<E> {
    /// `self + other` where `other`'s shape is a suffix of `self`'s shape;
    /// `other` is broadcast over the leading axes.
    pub fn add_broadcast(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let ls = self.shape();
        let rs = other.shape();
        if rs.len() > ls.len() || &ls[ls.len() - rs.len()..] != rs {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let block: usize = rs.iter().product();
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter()
                .enumerate()
                .map(|(i, &x)| x + b[i % block])
                .collect()
        };
        Ok(Tensor::from_op(
            ls.to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                        *gp += go;
                    }
                }
                if let Some(mut g) = ctx.parent_grad(1) {
                    for (i, &go) in ctx.grad.iter().enumerate() {
                        g[i % block] += go;
                    }
                }
            }),
        ))
    }

    /// Per-channel bias add: `self[N,C,*] + bias[C]`.
    pub fn add_channel_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || bias.shape() != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: shape,
                rhs: bias.shape().to_vec(),
            });
        }
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let data: Vec<E> = {
            let a = self.data();
            let b = bias.data();
            a.iter()
                .enumerate()
                .map(|(i, &x)| x + b[(i / spatial) % c])
                .collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                        *gp += go;
                    }
                }
                if let Some(mut g) = ctx.parent_grad(1) {
                    for (i, &go) in ctx.grad.iter().enumerate() {
                        g[(i / spatial) % c] += go;
                    }
                }
            }),
        ))
    }

    /// Gate a feature map by a one-channel map: `self[N,C,*] * gate[N,1,*]`.
    pub fn mul_channel_gate(&self, gate: &Tensor<E>) -> Result<Tensor<E>> {
        let xs = self.shape().to_vec();
        let gs = gate.shape().to_vec();
        if xs.len() < 3 || gs.len() != xs.len() || gs[0] != xs[0] || gs[1] != 1 || gs[2..] != xs[2..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel_gate",
                lhs: xs,
                rhs: gs,
            });
        }
        let n = xs[0];
        let c = xs[1];
        let spatial: usize = xs[2..].iter().product();
        let data: Vec<E> = {
            let x = self.data();
            let g = gate.data();
            let mut out = vec![E::zero(); x.len()];
            for b in 0..n {
                for ch in 0..c {
                    let xb = (b * c + ch) * spatial;
                    let gb = b * spatial;
                    for s in 0..spatial {
                        out[xb + s] = x[xb + s] * g[gb + s];
                    }
                }
            }
            out
        };
        Ok(Tensor::from_op(
            xs.clone(),
            data,
            vec![self.clone(), gate.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let gt = ctx.parents[1].data();
                if let Some(mut g) = ctx.parent_grad(0) {
                    for b in 0..n {
                        for ch in 0..c {
                            let xb = (b * c + ch) * spatial;
                            let gb = b * spatial;
                            for s in 0..spatial {
                                g[xb + s] += ctx.grad[xb + s] * gt[gb + s];
                            }
                        }
                    }
                }
                if let Some(mut g) = ctx.parent_grad(1) {
                    for b in 0..n {
                        for ch in 0..c {
                            let xb = (b * c + ch) * spatial;
                            let gb = b * spatial;
                            for s in 0..spatial {
                                g[gb + s] += ctx.grad[xb + s] * x[xb + s];
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Gather rows: `self[L,F]` indexed by `indices` -> `[indices.len(),F]`.
    /// Backward scatters into the table, so the table stays trainable.
    pub fn index_select_rows(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if self.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "index_select_rows",
                msg: format!("table must be rank 2, got {:?}", self.shape()),
            });
        }
        let (l, f) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= l) {
            return Err(TensorError::Invalid {
                op: "index_select_rows",
                msg: format!("index {} out of bounds for table of {} rows", bad, l),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(&src[i * f..(i + 1) * f]);
        }
        drop(src);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), f],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..f {
                            g[i * f + j] += ctx.grad[r * f + j];
                        }
                    }
                }
            }),
        ))
    }
}
