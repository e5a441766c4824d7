//! Tensor value type and the reverse-mode tape.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations that see
//! at least one input with `requires_grad` record a backward closure and the
//! parent handles, so the graph is rebuilt on every forward pass. Node ids are
//! handed out from a monotone counter, which makes "descending id" a valid
//! reverse topological order for [`Tensor::backward`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the output gradient and a "which parents need a gradient" mask to one
/// optional gradient buffer per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    op: &'static str,
    parents: Vec<Tensor>,
    apply: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// N-dimensional row-major array of `f64` that participates in the gradient tape.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a constant tensor. Every dim must be at least 1 and the data
    /// must be finite.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, false)
    }

    /// Builds a trainable leaf (`requires_grad = true`).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("new", format!("zero-sized dim in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} elements, got {}", numel_of(shape), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "new".into() });
        }
        Ok(Tensor(Arc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        })))
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel_of(shape)], shape).expect("zeros: valid shape")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(vec![v; numel_of(shape)], shape).expect("full: valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Tensor> {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Tensor::new(data, shape)
    }

    /// Records an op result. Finiteness is enforced here so no op can emit
    /// NaN/Inf silently.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        apply: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op}: shape/data mismatch");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn { op, parents, apply });
        Ok(Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Accumulated gradient, if `backward` has reached this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        let g = self.0.grad.lock().expect("grad lock poisoned");
        g.as_ref()
            .map(|g| Tensor::new(g.clone(), self.shape()).expect("grad has tensor shape"))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the tape, no gradient requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.data.clone(), self.shape()).expect("detach of valid tensor")
    }

    /// Same values as a fresh trainable leaf.
    pub fn detach_param(&self) -> Tensor {
        Tensor::param(self.0.data.clone(), self.shape()).expect("detach of valid tensor")
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients are added
    /// into every reachable `requires_grad` leaf, so repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor that is not connected to any parameter".into(),
            ));
        }

        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in &nodes {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad).collect();
                    let grads = (gf.apply)(&g, &needs);
                    for ((parent, grad), need) in gf.parents.iter().zip(grads).zip(needs) {
                        let (true, Some(grad)) = (need, grad) else {
                            continue;
                        };
                        debug_assert_eq!(grad.len(), parent.numel(), "{}: bad grad size", gf.op);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), grad);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
