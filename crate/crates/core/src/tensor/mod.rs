//! Dense row-major `f64` tensors with a recorded reverse-mode graph.
//!
//! Every differentiable op produces a new [`Tensor`] that keeps its parents
//! alive together with a closure mapping the output gradient to parent
//! gradients. Node ids grow monotonically, so sorting reachable nodes by
//! descending id is a valid reverse topological order.

mod conv;
mod gemm;
pub mod gradcheck;
pub mod init;
mod linalg;
mod norm;
mod ops;
mod store;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use conv::{conv_output_size, Padding};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use norm::{BatchNormOutput, DropoutKey, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use ops::{Activation, LEAKY_SLOPE};
pub use store::{EntryKind, ParameterStore};
pub(crate) use store::under as path_under;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    // (grad_out, out_data) -> one optional gradient per parent
    backward: Box<BackwardFn>,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
    grad: Mutex<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn>) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
            grad: Mutex::new(None),
        }))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::invalid_shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor::make(data, shape.to_vec(), false, None))
    }

    /// A leaf that collects gradients during [`Tensor::backward`].
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor::make(t.0.data.clone(), t.0.shape.clone(), true, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![v], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::make(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the values with no graph attached.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Builds the output of a differentiable op. The graph edge is only
    /// recorded when gradients are enabled and some parent requires them.
    pub(crate) fn from_op<F>(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Tensor
    where
        F: Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: shape/data mismatch");
        if cfg!(debug_assertions) && parents.iter().all(Tensor::is_finite) {
            assert!(
                data.iter().all(|v| v.is_finite()),
                "{name}: non-finite output from finite inputs"
            );
        }
        let record = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if record {
            let grad_fn = GradFn {
                name,
                parents,
                backward: Box::new(backward),
            };
            Tensor::make(data, shape, true, Some(grad_fn))
        } else {
            Tensor::make(data, shape, false, None)
        }
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in &order {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                None => node.accumulate_grad(&g),
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, &node.0.data);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{}: grad size", gf.name);
                        match grads.get_mut(&p.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_shape_matches_data() {
        assert!(Tensor::new(vec![1.0; 6], &[2, 3]).is_ok());
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::parameter(vec![3.0], &[1]).unwrap();
        for _ in 0..2 {
            w.mul(&w).unwrap().sum().backward().unwrap();
        }
        assert_eq!(w.grad().unwrap(), vec![12.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let w = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = w.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn no_grad_skips_recording() {
        let w = Tensor::parameter(vec![1.0], &[1]).unwrap();
        let y = {
            let _g = no_grad();
            w.scale(3.0)
        };
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn shared_subexpression_gets_both_contributions() {
        // y = (2w) * (2w) => dy/dw = 8w
        let w = Tensor::parameter(vec![0.5], &[1]).unwrap();
        let a = w.scale(2.0);
        a.mul(&a).unwrap().sum().backward().unwrap();
        assert!((w.grad().unwrap()[0] - 4.0).abs() < 1e-15);
    }
}
