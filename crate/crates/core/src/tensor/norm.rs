//! Fused normalisation ops.

use super::{BackwardArgs, Scalar, Tensor};

impl<T: Scalar> Tensor<T> {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let d = *self.shape().last().expect("softmax on a scalar");
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            let inv = T::one() / sum;
            for o in dst.iter_mut() {
                *o = *o * inv;
            }
        }
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |args: &BackwardArgs<'_, T>| {
            let y = args.out.data();
            let mut g = vec![T::zero(); y.len()];
            for ((yr, gr), dst) in y.chunks(d).zip(args.grad.chunks(d)).zip(g.chunks_mut(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(g)]
        })
    }

    /// Group normalisation without affine terms.
    ///
    /// The first axis is the sample axis and the last axis holds channels; all
    /// axes in between are pooled. Channels are split into `groups` contiguous groups.
    pub fn group_norm(&self, groups: usize, eps: f64) -> Tensor<T> {
        assert!(self.rank() >= 2);
        let n = self.dim(0);
        let c = *self.shape().last().unwrap();
        assert!(groups >= 1 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let cg = c / groups;
        let spatial = self.numel() / (n * c);
        let count = T::of((spatial * cg) as f64);
        let eps = T::of(eps);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        for b in 0..n {
            let base = b * spatial * c;
            for gi in 0..groups {
                let mut mean = T::zero();
                for s in 0..spatial {
                    let o = base + s * c + gi * cg;
                    mean = mean + x[o..o + cg].iter().copied().sum::<T>();
                }
                mean = mean / count;
                let mut var = T::zero();
                for s in 0..spatial {
                    let o = base + s * c + gi * cg;
                    for &v in &x[o..o + cg] {
                        var = var + (v - mean) * (v - mean);
                    }
                }
                var = var / count;
                let is = T::one() / (var + eps).sqrt();
                inv_std[b * groups + gi] = is;
                for s in 0..spatial {
                    let o = base + s * c + gi * cg;
                    for j in o..o + cg {
                        out[j] = (x[j] - mean) * is;
                    }
                }
            }
        }
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |args: &BackwardArgs<'_, T>| {
            let y = args.out.data();
            let gy = args.grad;
            let mut gx = vec![T::zero(); y.len()];
            for b in 0..n {
                let base = b * spatial * c;
                for gi in 0..groups {
                    let (mut sum_g, mut sum_gy) = (T::zero(), T::zero());
                    for s in 0..spatial {
                        let o = base + s * c + gi * cg;
                        for j in o..o + cg {
                            sum_g = sum_g + gy[j];
                            sum_gy = sum_gy + gy[j] * y[j];
                        }
                    }
                    let mg = sum_g / count;
                    let mgy = sum_gy / count;
                    let is = inv_std[b * groups + gi];
                    for s in 0..spatial {
                        let o = base + s * c + gi * cg;
                        for j in o..o + cg {
                            gx[j] = is * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
