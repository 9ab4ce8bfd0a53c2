//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Define-by-run graph over f64 storage. Forward results are computed
//! eagerly; each node carries a closure that routes its output gradient to
//! its parents. A single graph is single-threaded by contract.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod ops;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
    static CUR_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// Live/peak tensor allocation accounting for the current thread, used by
/// the attention memory-scaling measurement.
pub mod mem {
    use super::{CUR_BYTES, PEAK_BYTES};

    pub fn current() -> usize {
        CUR_BYTES.with(|c| c.get())
    }

    pub fn peak() -> usize {
        PEAK_BYTES.with(|c| c.get())
    }

    /// Resets the peak to the current live total.
    pub fn reset_peak() {
        let cur = current();
        PEAK_BYTES.with(|c| c.set(cur));
    }

    pub(super) fn alloc(bytes: usize) {
        CUR_BYTES.with(|c| c.set(c.get() + bytes));
        let cur = current();
        PEAK_BYTES.with(|c| {
            if cur > c.get() {
                c.set(cur);
            }
        });
    }

    pub(super) fn free(bytes: usize) {
        CUR_BYTES.with(|c| c.set(c.get().saturating_sub(bytes)));
    }
}

type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    id: usize,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        mem::free(self.values.borrow().len() * 8);
    }
}

/// Shared handle to a graph node.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "values length must match shape"
        );
        mem::alloc(values.len() * 8);
        let id = NEXT_ID.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        });
        Tensor {
            inner: Rc::new(Inner {
                id,
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf; does not participate in gradients.
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), values, false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; shape.iter().product()])
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), values, true, Vec::new(), None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        let bw = if requires { Some(backward) } else { None };
        Tensor::build(shape, values, requires, parents, bw)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.values.borrow()[0]
    }

    pub fn item(&self, idx: &[usize]) -> f64 {
        let s = strides(&self.inner.shape);
        let flat: usize = idx.iter().zip(s.iter()).map(|(i, st)| i * st).sum();
        self.inner.values.borrow()[flat]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place parameter update; only meaningful on leaves.
    pub fn update_values(&self, f: impl FnMut(usize, &mut f64)) {
        let mut vals = self.inner.values.borrow_mut();
        let mut f = f;
        for (i, v) in vals.iter_mut().enumerate() {
            f(i, v);
        }
    }

    pub fn set_values(&self, new: &[f64]) {
        let mut vals = self.inner.values.borrow_mut();
        assert_eq!(vals.len(), new.len());
        vals.copy_from_slice(new);
    }

    pub(crate) fn accum_grad(&self, contrib: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib.iter()) {
                    *e += c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Each reachable node that
    /// requires a gradient receives its accumulated gradient exactly once.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }
        // iterative postorder DFS over grad-requiring nodes
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            let parents = &node.inner.parents;
            let mut pushed = false;
            let mut i = child_idx;
            while i < parents.len() {
                let p = &parents[i];
                if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                    visited.insert(p.inner.id);
                    stack.push((node.clone(), i + 1));
                    stack.push((p.clone(), 0));
                    pushed = true;
                    break;
                }
                i += 1;
            }
            if !pushed {
                order.push(node);
            }
        }
        self.accum_grad(&[1.0]);
        for node in order.iter().rev() {
            let grad = node.inner.grad.borrow().clone();
            if let (Some(grad), Some(bw)) = (grad, node.inner.backward.as_ref()) {
                bw(&grad);
            }
        }
        Ok(())
    }
}

/// SGD with classical momentum: v <- m*v + g; p <- p - lr*v.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, vel) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p
                .grad()
                .ok_or_else(|| Error::Argument("missing gradient in sgd_step".into()))?;
            let lr = self.lr;
            let m = self.momentum;
            p.update_values(|i, v| {
                vel[i] = m * vel[i] + grad[i];
                *v -= lr * vel[i];
            });
        }
        for p in params {
            p.zero_grad();
        }
        Ok(())
    }
}

/// Central finite-difference check of the analytic gradients of `f`.
///
/// Returns the max over sampled coordinates of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check(
    f: impl Fn(&[Tensor]) -> Tensor,
    params: &[Tensor],
    eps: f64,
    max_coords_per_param: usize,
) -> f64 {
    for p in params {
        p.zero_grad();
    }
    let loss = f(params);
    loss.backward().expect("grad_check needs a scalar loss");
    let mut worst = 0.0f64;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        let n = p.len();
        let step = (n / max_coords_per_param.max(1)).max(1);
        let base = p.values();
        let mut coord = 0;
        while coord < n {
            let mut plus = base.clone();
            plus[coord] += eps;
            p.set_values(&plus);
            let f_plus = f(params).scalar();
            let mut minus = base.clone();
            minus[coord] -= eps;
            p.set_values(&minus);
            let f_minus = f(params).scalar();
            p.set_values(&base);
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
            coord += step;
        }
    }
    for p in params {
        p.zero_grad();
    }
    worst
}

/// Per-batch-row token validity for padded sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub valid: Vec<Vec<bool>>,
}

impl AttentionMask {
    pub fn all_valid(batch: usize, len: usize) -> AttentionMask {
        AttentionMask {
            valid: vec![vec![true; len]; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.valid.len()
    }

    pub fn len(&self) -> usize {
        self.valid.first().map_or(0, |v| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}
