//! Dense N-D tensor with a dynamically built reverse-mode autodiff graph.
//!
//! Tensors are cheaply clonable handles (`Rc`) onto an immutable value buffer
//! plus an optional gradient buffer. Every differentiable operation records a
//! graph node holding its input tensors and a backward rule; `backward` on a
//! scalar loss walks the graph in reverse topological order and accumulates
//! gradients into every reachable leaf that requires them.
//!
//! The element type is generic: training runs in `f32`, gradient checking and
//! metric oracles in `f64`.

mod elem;
mod ops;
pub mod grad_check;

pub use elem::Elem;
pub use grad_check::{grad_check, GradCheckReport};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled; ops executed inside produce leaf
/// tensors with no backward rule. Used for validation passes and inference.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

static INTRA_OP_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps intra-op parallelism. Work inside a primitive is split over disjoint
/// output chunks, so results are bitwise identical for any thread count.
pub fn set_intra_op_threads(n: usize) {
    INTRA_OP_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn intra_op_threads() -> usize {
    INTRA_OP_THREADS.load(Ordering::Relaxed)
}

/// Context handed to a backward rule.
pub struct OpCtx<'a, T: Elem> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad_out: &'a [T],
}

impl<T: Elem> OpCtx<'_, T> {
    /// True when input `i` participates in the gradient flow.
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

type BackwardFn<T> = Box<dyn Fn(&OpCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct GraphNode<T: Elem> {
    op_name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Elem> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    node: Option<GraphNode<T>>,
}

/// Dense row-major N-D tensor handle.
pub struct Tensor<T: Elem = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field("op", &self.inner.node.as_ref().map(|n| n.op_name))
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Elem> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, node: Option<GraphNode<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = node.is_some()
            && node
                .as_ref()
                .map(|n| n.inputs.iter().any(|t| t.requires_grad()))
                .unwrap_or(false);
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires),
                node,
            }),
        }
    }

    /// Creates a leaf tensor from explicit data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::Length { expected: n, got: data.len() });
        }
        Ok(Self::from_parts(shape.to_vec(), data, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![T::zero(); n], None))
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![T::one(); n], None))
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; n], None))
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value], None)
    }

    /// Uniform samples in `[a, b)`. Sampling happens in `f64` so that the
    /// stream is identical for every element type given the same RNG state.
    pub fn rand_uniform(shape: &[usize], a: f64, b: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let dist = Uniform::new(a, b);
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        Ok(Self::from_parts(shape.to_vec(), data, None))
    }

    pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let dist = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        Ok(Self::from_parts(shape.to_vec(), data, None))
    }

    /// Truncated normal: resamples anything beyond two standard deviations.
    pub fn rand_trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let data = (0..n)
            .map(|_| {
                let mut x = dist.sample(rng);
                while x.abs() > 2.0 * std {
                    x = dist.sample(rng);
                }
                T::from_f64(x)
            })
            .collect();
        Ok(Self::from_parts(shape.to_vec(), data, None))
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op_name)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Marks a leaf as a trainable parameter. Builder-style.
    pub fn with_requires_grad(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Direct mutable access to the value buffer. Reserved for optimizers and
    /// buffer updates; graph ops never mutate their inputs.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_norm(&self) -> Option<f64> {
        self.inner
            .grad
            .borrow()
            .as_ref()
            .map(|g| g.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Detached copy: same values, fresh leaf, no graph history.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.inner.shape.clone(), self.to_vec(), None)
    }

    /// Records the result of an operation. When grad recording is off or no
    /// input needs gradients, the node is dropped and the result is a leaf.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op_name: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&OpCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let record = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if record {
            Self::from_parts(
                shape,
                data,
                Some(GraphNode { op_name, inputs, backward: Box::new(backward) }),
            )
        } else {
            Self::from_parts(shape, data, None)
        }
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate into every
    /// reachable leaf with `requires_grad` until `zero_grad` is called.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.numel()));
        }

        // Post-order DFS, iterative to keep deep graphs off the call stack.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, child)) = stack.pop() {
            let n_children = t.inner.node.as_ref().map(|n| n.inputs.len()).unwrap_or(0);
            if child < n_children {
                stack.push((t.clone(), child + 1));
                let next = t.inner.node.as_ref().unwrap().inputs[child].clone();
                if next.requires_grad() && visited.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for t in topo.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match t.inner.node.as_ref() {
                Some(node) => {
                    let ctx = OpCtx { inputs: &node.inputs, output: t, grad_out: &g };
                    let input_grads = (node.backward)(&ctx);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "bad grad length from {}", node.op_name);
                        match grads.get_mut(&inp.id()) {
                            Some(buf) => {
                                for (b, x) in buf.iter_mut().zip(ig) {
                                    *b += x;
                                }
                            }
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
                None => {
                    if t.requires_grad() {
                        t.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Splits `out` into at most `intra_op_threads()` contiguous chunks and runs
/// `work(chunk_start, chunk)` on each, in parallel when threads > 1. Chunk
/// contents are computed independently, so the result does not depend on the
/// thread count.
pub(crate) fn par_chunks<T: Send>(out: &mut [T], min_per_thread: usize, work: impl Fn(usize, &mut [T]) + Sync) {
    let threads = intra_op_threads().min(out.len() / min_per_thread.max(1)).max(1);
    if threads <= 1 {
        work(0, out);
        return;
    }
    let chunk = out.len().div_ceil(threads);
    std::thread::scope(|s| {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            let work = &work;
            s.spawn(move || work(i * chunk, c));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn create_zeros() {
        let t = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.to_vec(), vec![0.0; 6]);
    }

    #[test]
    fn create_explicit_scalar() {
        let t = Tensor::<f32>::from_vec(vec![5.0], &[1]).unwrap();
        assert_eq!(t.item(), 5.0);
    }

    #[test]
    fn create_rejects_zero_extent() {
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn create_rejects_wrong_length() {
        let r = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[3]);
        assert!(matches!(r, Err(Error::Length { expected: 3, got: 2 })));
    }

    #[test]
    fn seeded_normal_is_bitwise_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::rand_normal(&[4, 4], 0.0, 0.02, &mut r1).unwrap();
        let b = Tensor::<f32>::rand_normal(&[4, 4], 0.0, 0.02, &mut r2).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn different_seeds_differ() {
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::rand_normal(&[8], 0.0, 1.0, &mut r1).unwrap();
        let b = Tensor::<f32>::rand_normal(&[8], 0.0, 1.0, &mut r2).unwrap();
        assert_ne!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f32>::ones(&[3]).unwrap().with_requires_grad();
        assert!(matches!(t.backward(), Err(Error::NonScalarLoss(3))));
    }

    #[test]
    fn backward_linear_sum() {
        let w = Tensor::<f32>::ones(&[3]).unwrap().with_requires_grad();
        let loss = w.sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let w = Tensor::<f32>::from_vec(vec![2.0, -1.0], &[2]).unwrap().with_requires_grad();
        let loss = w.mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, -2.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let w = Tensor::<f32>::ones(&[2]).unwrap().with_requires_grad();
        w.sum_all().backward().unwrap();
        w.sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
        w.sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let w = Tensor::<f32>::ones(&[2]).unwrap().with_requires_grad();
        let y = no_grad(|| w.mul(&w).unwrap());
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        let before = a.to_vec();
        let _ = a.add(&b).unwrap();
        let _ = a.mul(&b).unwrap();
        assert_eq!(a.to_vec(), before);
    }
}
