//! Elementwise arithmetic with broadcasting, reductions and layout ops.

use super::{numel, BackwardArgs, Scalar, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    (0..rank)
        .map(|i| {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("cannot broadcast {a:?} with {b:?}"),
            }
        })
        .collect()
}

/// Strides of `shape` viewed inside `out_shape` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output index with the matching offsets into two broadcast inputs.
fn for_each2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out_shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += ia_step;
            b += ib_step;
        }
        // odometer increment over the outer axes
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (laid out as `out_shape`) down to `target` by broadcasting rules.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    if out_shape == target {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); numel(target)];
    let st = broadcast_strides(target, out_shape);
    let zero = vec![0; out_shape.len()];
    for_each2(out_shape, &st, &zero, |o, t, _| acc[t] = acc[t] + grad[o]);
    acc
}

fn expand<T: Scalar>(data: &[T], shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    if shape == out_shape {
        return data.to_vec();
    }
    let mut out = vec![T::zero(); numel(out_shape)];
    let st = broadcast_strides(shape, out_shape);
    let zero = vec![0; out_shape.len()];
    for_each2(out_shape, &st, &zero, |o, s, _| out[o] = data[s]);
    out
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Tensor<T> {
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    let (ad, bd) = (a.data(), b.data());
    let apply = |x: T, y: T| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    if a.shape() == b.shape() {
        out.extend(ad.iter().zip(bd).map(|(&x, &y)| apply(x, y)));
    } else {
        out.resize(n, T::zero());
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        for_each2(&out_shape, &sa, &sb, |o, i, j| out[o] = apply(ad[i], bd[j]));
    }
    let shape_for_grad = out_shape.clone();
    Tensor::from_op(out_shape, out, &[a, b], move |args: &BackwardArgs<'_, T>| {
        let (a, b) = (&args.inputs[0], &args.inputs[1]);
        let g = args.grad;
        let os = &shape_for_grad;
        let ga = args.needs(0).then(|| match op {
            BinOp::Add | BinOp::Sub => reduce_to_shape(g, os, a.shape()),
            BinOp::Mul => {
                let be = expand(b.data(), b.shape(), os);
                let prod: Vec<T> = g.iter().zip(&be).map(|(&g, &y)| g * y).collect();
                reduce_to_shape(&prod, os, a.shape())
            }
            BinOp::Div => {
                let be = expand(b.data(), b.shape(), os);
                let prod: Vec<T> = g.iter().zip(&be).map(|(&g, &y)| g / y).collect();
                reduce_to_shape(&prod, os, a.shape())
            }
        });
        let gb = args.needs(1).then(|| match op {
            BinOp::Add => reduce_to_shape(g, os, b.shape()),
            BinOp::Sub => {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                reduce_to_shape(&neg, os, b.shape())
            }
            BinOp::Mul => {
                let ae = expand(a.data(), a.shape(), os);
                let prod: Vec<T> = g.iter().zip(&ae).map(|(&g, &x)| g * x).collect();
                reduce_to_shape(&prod, os, b.shape())
            }
            BinOp::Div => {
                // d(x/y)/dy = -out / y
                let be = expand(b.data(), b.shape(), os);
                let prod: Vec<T> = g
                    .iter()
                    .zip(args.out.data())
                    .zip(&be)
                    .map(|((&g, &o), &y)| -g * o / y)
                    .collect();
                reduce_to_shape(&prod, os, b.shape())
            }
        });
        vec![ga, gb]
    })
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)`.
    pub(crate) fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |args: &BackwardArgs<'_, T>| {
            let x = args.inputs[0].data();
            let y = args.out.data();
            let g = args.grad.iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| g * df(x, y)).collect();
            vec![Some(g)]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            |x| x / (T::one() + (-x).exp()),
            |x, _| {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let a = T::of(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * a },
            move |x, _| if x > T::zero() { T::one() } else { a },
        )
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    /// Clamp with a pass-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum::<T>();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], &[self], move |args: &BackwardArgs<'_, T>| {
            vec![Some(vec![args.grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let mut target = self.shape().to_vec();
        for &a in axes {
            target[a] = 1;
        }
        let out = reduce_to_shape(self.data(), self.shape(), &target);
        let in_shape = self.shape().to_vec();
        let tshape = target.clone();
        Tensor::from_op(target, out, &[self], move |args: &BackwardArgs<'_, T>| {
            vec![Some(expand(args.grad, &tshape, &in_shape))]
        })
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_keepdim(axes).scale(1.0 / count.max(1) as f64)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(broadcast_shape(self.shape(), shape), shape, "broadcast_to {:?} -> {shape:?}", self.shape());
        let out = expand(self.data(), self.shape(), shape);
        let in_shape = self.shape().to_vec();
        let os = shape.to_vec();
        Tensor::from_op(shape.to_vec(), out, &[self], move |args: &BackwardArgs<'_, T>| {
            vec![Some(reduce_to_shape(args.grad, &os, &in_shape))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        self.share_op(shape.to_vec())
    }

    /// General axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        assert_eq!(perm.len(), self.rank());
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let out = permute_data(self.data(), &in_shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let os = out_shape.clone();
        Tensor::from_op(out_shape, out, &[self], move |args: &BackwardArgs<'_, T>| {
            vec![Some(permute_data(args.grad, &os, &inverse))]
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Tensor::from_op(out_shape, out, &[self], move |args: &BackwardArgs<'_, T>| {
            let mut g = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                let src = &args.grad[o * len * inner..(o + 1) * len * inner];
                g[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(g)]
        })
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty());
        let first = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), first.len());
            for (i, (&x, &y)) in p.shape().iter().zip(&first).enumerate() {
                assert!(i == axis || x == y, "cat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::from_op(out_shape, out, &refs, move |args: &BackwardArgs<'_, T>| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&args.grad[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().enumerate().map(|(i, g)| args.needs(i).then_some(g)).collect()
        })
    }

    /// Gather `indices` along `axis` (indices may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        assert!(indices.iter().all(|&i| i < full), "index_select out of range");
        let d = self.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * full + i) * inner;
                out.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let idx = indices.to_vec();
        Tensor::from_op(out_shape, out, &[self], move |args: &BackwardArgs<'_, T>| {
            let mut g = vec![T::zero(); outer * full * inner];
            let mut off = 0;
            for o in 0..outer {
                for &i in &idx {
                    let base = (o * full + i) * inner;
                    for (dst, &src) in g[base..base + inner].iter_mut().zip(&args.grad[off..off + inner]) {
                        *dst = *dst + src;
                    }
                    off += inner;
                }
            }
            vec![Some(g)]
        })
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "mse shape mismatch");
        self.sub(other).square().mean_all()
    }
}

pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); data.len()];
    if rank == 0 {
        out.copy_from_slice(data);
        return out;
    }
    let zero = vec![0; rank];
    for_each2(&out_shape, &src_strides, &zero, |o, s, _| out[o] = data[s]);
    out
}
