//! A small reverse-mode autograd engine over dense, row-major tensors.
//!
//! Image-like tensors are channels-last (`[N, H, W, C]`). Tensors are cheap to
//! clone (reference counted) and immutable once built; every op allocates a
//! fresh output. A tensor records its producing op only when at least one input
//! requires a gradient, so inference builds no graph at all.

mod linalg;
mod norm;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive};

/// Element type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + std::iter::Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = alpha * a · b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    ///
    /// Every stride/extent combination must stay inside the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Matrix view: buffer plus (rows, cols) and whether it is read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    /// Rows/cols of the stored (untransposed) row-major matrix.
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, trans: bool) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, trans }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.trans {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out (m×n) = alpha · op(a) · op(b) + beta · out`, bounds-checked.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], alpha: T, beta: T) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    // SAFETY: extents checked above; strides describe dense row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(1) };
}

fn fresh_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

/// What an op's backward closure sees.
pub(crate) struct BackwardArgs<'a, T: Scalar> {
    pub grad: &'a [T],
    pub out: &'a Tensor<T>,
    pub inputs: &'a [Tensor<T>],
}

impl<T: Scalar> BackwardArgs<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

struct GradFn<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    f: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Dense tensor node in the autograd graph.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}(grad={})", self.inner.shape, self.inner.requires_grad)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self::build(shape.to_vec(), Rc::new(data), false, None)
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self::build(shape.to_vec(), Rc::new(data), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![T::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[], vec![v])
    }

    fn build(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Self {
            inner: Rc::new(Inner { id: fresh_id(), shape, data, requires_grad, grad_fn }),
        }
    }

    /// Output of an op. The backward closure is kept only when some input needs a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        f: impl Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            f: Box::new(f),
        });
        Self::build(shape, Rc::new(data), requires_grad, grad_fn)
    }

    /// Shares the buffer with a new shape and an identity backward.
    pub(crate) fn share_op(&self, shape: Vec<usize>) -> Self {
        assert_eq!(numel(&shape), self.numel(), "reshape {:?} -> {:?}", self.shape(), shape);
        let grad_fn = self.requires_grad().then(|| GradFn {
            inputs: vec![self.clone()],
            f: Box::new(|a: &BackwardArgs<'_, T>| vec![Some(a.grad.to_vec())]) as BackwardFn<T>,
        });
        Self::build(shape, Rc::clone(&self.inner.data), self.requires_grad(), grad_fn)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.inner.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), Rc::clone(&self.inner.data), false, None)
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(self.shape(), self.data().iter().map(|v| U::of(v.to_f64().unwrap())).collect())
    }

    pub fn has_non_finite(&self) -> bool {
        self.data().iter().any(|v| !v.is_finite())
    }

    /// Gradients of this scalar with respect to every leaf that requires one.
    pub fn backward(&self) -> Grads<T> {
        assert_eq!(self.numel(), 1, "backward() needs a scalar, got shape {:?}", self.shape());
        self.backward_with(vec![T::one()])
    }

    /// Vector-Jacobian product seeded with `seed` (same length as this tensor).
    pub fn backward_with(&self, seed: Vec<T>) -> Grads<T> {
        assert_eq!(seed.len(), self.numel());
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Grads { map: leaves };
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else { continue };
            match &node.inner.grad_fn {
                None => {
                    accumulate(&mut leaves, node.id(), grad);
                }
                Some(gf) => {
                    let args = BackwardArgs { grad: &grad, out: node, inputs: &gf.inputs };
                    let input_grads = (gf.f)(&args);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len());
                    for (input, g) in gf.inputs.iter().zip(input_grads) {
                        if let Some(g) = g {
                            if input.requires_grad() {
                                debug_assert_eq!(g.len(), input.numel());
                                accumulate(&mut pending, input.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Grads { map: leaves }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.inner.grad_fn {
                for input in &gf.inputs {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate<T: Scalar>(map: &mut HashMap<usize, Vec<T>>, id: usize, g: Vec<T>) {
    match map.get_mut(&id) {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => {
            map.insert(id, g);
        }
    }
}

/// Leaf gradients produced by [`Tensor::backward`].
pub struct Grads<T> {
    map: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    pub fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        self.map.remove(&t.id())
    }
}

#[cfg(test)]
mod tests;
