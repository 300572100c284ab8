//! Matrix products, NHWC convolution and resampling.

use std::rc::Rc;

use super::{gemm, numel, BackwardArgs, MatRef, Scalar, Tensor};

/// Geometry of a 2D convolution over `[N, H, W, Cin]` with `[kh, kw, Cin, Cout]` weights.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.k();
    let mut cols = vec![T::zero(); g.rows() * k];
    let mut row = 0;
    for n in 0..g.n {
        let img = &x[n * g.h * g.w * g.cin..(n + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.k();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    let mut row = 0;
    for n in 0..g.n {
        let img = &mut x[n * g.h * g.w * g.cin..(n + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src_row = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for (d, &s) in img[dst..dst + g.cin].iter_mut().zip(&src_row[off..off + g.cin]) {
                            *d = *d + s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

impl<T: Scalar> Tensor<T> {
    /// Batched matrix product `self · other`, optionally transposing `other`.
    ///
    /// `self` is `[..., M, K]`. `other` is either `[K, N]` (shared across the
    /// batch) or `[..., K, N]` with the same leading dims; with `trans_other`
    /// the trailing pair of `other` is read as `[N, K]`.
    fn matmul_impl(&self, other: &Tensor<T>, trans_other: bool) -> Tensor<T> {
        let ar = self.rank();
        assert!(ar >= 2, "matmul lhs must be at least 2D");
        let (m, k) = (self.dim(ar - 2), self.dim(ar - 1));
        let br = other.rank();
        assert!(br >= 2, "matmul rhs must be at least 2D");
        let (b0, b1) = (other.dim(br - 2), other.dim(br - 1));
        let (bk, n) = if trans_other { (b1, b0) } else { (b0, b1) };
        assert_eq!(k, bk, "matmul inner dims {:?} x {:?}", self.shape(), other.shape());
        let batch = numel(&self.shape()[..ar - 2]);
        let shared = br == 2;
        if !shared {
            assert_eq!(&self.shape()[..ar - 2], &other.shape()[..br - 2], "matmul batch dims differ");
        }
        let mut out_shape = self.shape()[..ar - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(), other.data());
        if shared && !trans_other {
            // fold the batch into rows
            gemm(MatRef::new(ad, batch * m, k, false), MatRef::new(bd, b0, b1, false), &mut out, T::one(), T::zero());
        } else {
            for i in 0..batch {
                let a = &ad[i * m * k..(i + 1) * m * k];
                let b = if shared { bd } else { &bd[i * b0 * b1..(i + 1) * b0 * b1] };
                gemm(
                    MatRef::new(a, m, k, false),
                    MatRef::new(b, b0, b1, trans_other),
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::one(),
                    T::zero(),
                );
            }
        }
        Tensor::from_op(out_shape, out, &[self, other], move |args: &BackwardArgs<'_, T>| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let (ad, bd, g) = (a.data(), b.data(), args.grad);
            let ga = args.needs(0).then(|| {
                // dA = dC · op(B)^T
                let mut ga = vec![T::zero(); batch * m * k];
                if shared && !trans_other {
                    gemm(MatRef::new(g, batch * m, n, false), MatRef::new(bd, b0, b1, true), &mut ga, T::one(), T::zero());
                } else {
                    for i in 0..batch {
                        let bm = if shared { bd } else { &bd[i * b0 * b1..(i + 1) * b0 * b1] };
                        gemm(
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n, false),
                            MatRef::new(bm, b0, b1, !trans_other),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            T::one(),
                            T::zero(),
                        );
                    }
                }
                ga
            });
            let gb = args.needs(1).then(|| {
                let mut gb = vec![T::zero(); b.numel()];
                if shared {
                    // dB = A^T · dC over the folded batch (or its transpose)
                    if trans_other {
                        gemm(MatRef::new(g, batch * m, n, true), MatRef::new(ad, batch * m, k, false), &mut gb, T::one(), T::zero());
                    } else {
                        gemm(MatRef::new(ad, batch * m, k, true), MatRef::new(g, batch * m, n, false), &mut gb, T::one(), T::zero());
                    }
                } else {
                    for i in 0..batch {
                        let am = &ad[i * m * k..(i + 1) * m * k];
                        let gm = &g[i * m * n..(i + 1) * m * n];
                        let dst = &mut gb[i * b0 * b1..(i + 1) * b0 * b1];
                        if trans_other {
                            gemm(MatRef::new(gm, m, n, true), MatRef::new(am, m, k, false), dst, T::one(), T::zero());
                        } else {
                            gemm(MatRef::new(am, m, k, true), MatRef::new(gm, m, n, false), dst, T::one(), T::zero());
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the trailing two axes.
    pub fn matmul_t(&self, other: &Tensor<T>) -> Tensor<T> {
        self.matmul_impl(other, true)
    }

    /// 2D convolution: `self` is `[N, H, W, Cin]`, `weight` is `[kh, kw, Cin, Cout]`.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "conv2d input must be NHWC");
        assert_eq!(weight.rank(), 4, "conv2d weight must be [kh, kw, cin, cout]");
        assert!(stride >= 1);
        let (n, h, w, cin) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (kh, kw, wc, cout) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(cin, wc, "conv2d channel mismatch {:?} vs {:?}", self.shape(), weight.shape());
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let g = ConvGeom { n, h, w, cin, kh, kw, stride, pad, ho, wo };
        let keep_cols = self.requires_grad() || weight.requires_grad();
        let (cols, out) = if g.is_pointwise() {
            let mut out = vec![T::zero(); g.rows() * cout];
            gemm(MatRef::new(self.data(), g.rows(), cin, false), MatRef::new(weight.data(), cin, cout, false), &mut out, T::one(), T::zero());
            (None, out)
        } else {
            let cols = im2col(self.data(), &g);
            let mut out = vec![T::zero(); g.rows() * cout];
            gemm(MatRef::new(&cols, g.rows(), g.k(), false), MatRef::new(weight.data(), g.k(), cout, false), &mut out, T::one(), T::zero());
            (keep_cols.then(|| Rc::new(cols)), out)
        };
        Tensor::from_op(vec![n, ho, wo, cout], out, &[self, weight], move |args: &BackwardArgs<'_, T>| {
            let (x, wt) = (&args.inputs[0], &args.inputs[1]);
            let gy = args.grad;
            let gx = args.needs(0).then(|| {
                if g.is_pointwise() {
                    let mut gx = vec![T::zero(); x.numel()];
                    gemm(MatRef::new(gy, g.rows(), cout, false), MatRef::new(wt.data(), cin, cout, true), &mut gx, T::one(), T::zero());
                    gx
                } else {
                    let mut gcols = vec![T::zero(); g.rows() * g.k()];
                    gemm(MatRef::new(gy, g.rows(), cout, false), MatRef::new(wt.data(), g.k(), cout, true), &mut gcols, T::one(), T::zero());
                    col2im(&gcols, &g)
                }
            });
            let gw = args.needs(1).then(|| {
                let mut gw = vec![T::zero(); wt.numel()];
                match &cols {
                    Some(c) => gemm(MatRef::new(c, g.rows(), g.k(), true), MatRef::new(gy, g.rows(), cout, false), &mut gw, T::one(), T::zero()),
                    None => gemm(MatRef::new(x.data(), g.rows(), g.k(), true), MatRef::new(gy, g.rows(), cout, false), &mut gw, T::one(), T::zero()),
                }
                gw
            });
            vec![gx, gw]
        })
    }

    /// Average pooling with kernel = stride = `f` over NHWC.
    pub fn avg_pool(&self, f: usize) -> Tensor<T> {
        assert_eq!(self.rank(), 4);
        let (n, h, w, c) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert!(h % f == 0 && w % f == 0, "avg_pool factor {f} does not divide {h}x{w}");
        if f == 1 {
            return self.clone();
        }
        let (ho, wo) = (h / f, w / f);
        let inv = T::of(1.0 / (f * f) as f64);
        let x = self.data();
        let mut out = vec![T::zero(); n * ho * wo * c];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((b * h + y) * w + xx) * c;
                    let dst = ((b * ho + y / f) * wo + xx / f) * c;
                    for ch in 0..c {
                        out[dst + ch] = out[dst + ch] + x[src + ch] * inv;
                    }
                }
            }
        }
        Tensor::from_op(vec![n, ho, wo, c], out, &[self], move |args: &BackwardArgs<'_, T>| {
            let mut g = vec![T::zero(); n * h * w * c];
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let dst = ((b * h + y) * w + xx) * c;
                        let src = ((b * ho + y / f) * wo + xx / f) * c;
                        for ch in 0..c {
                            g[dst + ch] = args.grad[src + ch] * inv;
                        }
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Nearest-neighbour upsampling by an integer factor over NHWC.
    pub fn upsample_nearest(&self, f: usize) -> Tensor<T> {
        assert_eq!(self.rank(), 4);
        if f == 1 {
            return self.clone();
        }
        let (n, h, w, c) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (ho, wo) = (h * f, w * f);
        let x = self.data();
        let mut out = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    let src = ((b * h + y / f) * w + xx / f) * c;
                    out.extend_from_slice(&x[src..src + c]);
                }
            }
        }
        Tensor::from_op(vec![n, ho, wo, c], out, &[self], move |args: &BackwardArgs<'_, T>| {
            let mut g = vec![T::zero(); n * h * w * c];
            for b in 0..n {
                for y in 0..ho {
                    for xx in 0..wo {
                        let src = ((b * ho + y) * wo + xx) * c;
                        let dst = ((b * h + y / f) * w + xx / f) * c;
                        for ch in 0..c {
                            g[dst + ch] = g[dst + ch] + args.grad[src + ch];
                        }
                    }
                }
            }
            vec![Some(g)]
        })
    }
}
