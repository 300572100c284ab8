//! Cross-stream joint attention with multiplicative position embeddings.

use crate::config::PeTarget;
use crate::error::{Error, Result};
use crate::nn::layers::{head_count, multi_head_attention, GroupNorm, Linear};
use crate::nn::{Binding, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Learnable tables for one joint-module resolution.
///
/// Height and width tables are shared by the common and unique paths; the temporal
/// tables tell the two apart.
#[derive(Clone, Debug)]
pub struct PeTables {
    pub he_q: ParamId,
    pub he_k: ParamId,
    pub we_q: ParamId,
    pub we_k: ParamId,
    pub cte_q: ParamId,
    pub cte_k: ParamId,
    pub ute_q: ParamId,
    pub ute_k: ParamId,
    pub side: usize,
    pub frames: usize,
    pub dim: usize,
}

/// Initial spread around 1, so the products start close to the identity.
pub const PE_INIT_STD: f64 = 0.02;

impl PeTables {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, side: usize, frames: usize, dim: usize) -> Self {
        let mut pb = pb.sub(name);
        let mut table = |n: &str, shape: &[usize]| pb.normal(n, shape, 1.0, PE_INIT_STD);
        Self {
            he_q: table("he_q", &[side, dim]),
            he_k: table("he_k", &[side, dim]),
            we_q: table("we_q", &[side, dim]),
            we_k: table("we_k", &[side, dim]),
            cte_q: table("cte_q", &[dim]),
            cte_k: table("cte_k", &[dim]),
            ute_q: table("ute_q", &[frames, dim]),
            ute_k: table("ute_k", &[frames, dim]),
            side,
            frames,
            dim,
        }
    }

    fn spatial<T: Scalar>(&self, p: &Binding<'_, T>, he: ParamId, we: ParamId) -> Tensor<T> {
        let (s, d) = (self.side, self.dim);
        p.get(he).reshape(&[1, s, 1, d]).mul(&p.get(we).reshape(&[1, 1, s, d]))
    }

    /// `ce[h,w,d] = cte[d]·he[h,d]·we[w,d]`, each `[1, s, s, D']`.
    pub fn common<T: Scalar>(&self, p: &Binding<'_, T>) -> (Tensor<T>, Tensor<T>) {
        let d = self.dim;
        let q = p.get(self.cte_q).reshape(&[1, 1, 1, d]).mul(&self.spatial(p, self.he_q, self.we_q));
        let k = p.get(self.cte_k).reshape(&[1, 1, 1, d]).mul(&self.spatial(p, self.he_k, self.we_k));
        (q, k)
    }

    /// `ue[t,h,w,d] = ute[t,d]·he[h,d]·we[w,d]`, each `[T, s, s, D']`.
    pub fn unique<T: Scalar>(&self, p: &Binding<'_, T>) -> (Tensor<T>, Tensor<T>) {
        let (t, d) = (self.frames, self.dim);
        let q = p.get(self.ute_q).reshape(&[t, 1, 1, d]).mul(&self.spatial(p, self.he_q, self.we_q));
        let k = p.get(self.ute_k).reshape(&[t, 1, 1, d]).mul(&self.spatial(p, self.he_k, self.we_k));
        (q, k)
    }

    /// `[ce : ue]` along time, each `[T+1, s, s, D']`.
    pub fn joint<T: Scalar>(&self, p: &Binding<'_, T>) -> (Tensor<T>, Tensor<T>) {
        let (cq, ck) = self.common(p);
        let (uq, uk) = self.unique(p);
        (Tensor::cat(&[cq, uq], 0), Tensor::cat(&[ck, uk], 0))
    }
}

/// Updated features of both streams plus the attention weights `[B·w²·heads, L, L]`.
pub struct JointOutput<T: Scalar> {
    pub common: Tensor<T>,
    pub unique: Tensor<T>,
    pub weights: Tensor<T>,
}

/// Attention over the temporal stack `[z_c : z_u^1..T]`, computed inside `w × w` spatial blocks.
#[derive(Clone, Debug)]
pub struct JointModule {
    pub norm_c: GroupNorm,
    pub norm_u: GroupNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub channels: usize,
    pub side: usize,
    pub blocks: usize,
    pub heads: usize,
    pub target: PeTarget,
}

impl JointModule {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        side: usize,
        blocks: usize,
        target: PeTarget,
    ) -> Result<Self> {
        if blocks == 0 || side % blocks != 0 {
            return Err(Error::Config(format!("joint module side {side} is not divisible by w = {blocks}")));
        }
        let mut pb = pb.sub(name);
        Ok(Self {
            norm_c: GroupNorm::new(&mut pb, "norm_c", channels),
            norm_u: GroupNorm::new(&mut pb, "norm_u", channels),
            qkv: Linear::new(&mut pb, "qkv", channels, 3 * channels, true),
            proj: Linear::zeroed(&mut pb, "proj", channels, channels, true),
            channels,
            side,
            blocks,
            heads: head_count(channels),
            target,
        })
    }

    /// Tokens attending together in one block.
    pub fn block_tokens(&self, frames: usize) -> usize {
        let b = self.side / self.blocks;
        (frames + 1) * b * b
    }

    /// Scatters per-block weights `[B·w²·heads, L, L]` into full maps `[B·heads, N, N]`
    /// over all `N = (T+1)·s²` tokens in `(t, h, w)` order; pairs in different blocks get 0.
    pub fn dense_weights<T: Scalar>(&self, weights: &Tensor<T>, batch: usize, frames: usize) -> Tensor<T> {
        let (s, w) = (self.side, self.blocks);
        let b = s / w;
        let stack = frames + 1;
        let (l, n) = (stack * b * b, stack * s * s);
        assert_eq!(weights.shape(), &[batch * w * w * self.heads, l, l], "block weight layout");
        // global index of local token i in block (bh, bw)
        let global = |bh: usize, bw: usize, i: usize| {
            let (t, r) = (i / (b * b), i % (b * b));
            let (h, x) = (bh * b + r / b, bw * b + r % b);
            (t * s + h) * s + x
        };
        let src = weights.data();
        let mut out = vec![T::zero(); batch * self.heads * n * n];
        for bi in 0..batch {
            for bh in 0..w {
                for bw in 0..w {
                    for head in 0..self.heads {
                        let blk = ((bi * w + bh) * w + bw) * self.heads + head;
                        let dst = (bi * self.heads + head) * n * n;
                        for i in 0..l {
                            let gi = global(bh, bw, i);
                            for j in 0..l {
                                out[dst + gi * n + global(bh, bw, j)] = src[(blk * l + i) * l + j];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[batch * self.heads, n, n], out)
    }

    /// `common` is `[B, s, s, C]`, `unique` is `[B·T, s, s, C]`.
    pub fn forward<T: Scalar>(
        &self,
        p: &Binding<'_, T>,
        common: &Tensor<T>,
        unique: &Tensor<T>,
        pe: Option<&PeTables>,
    ) -> Result<JointOutput<T>> {
        let (s, c) = (self.side, self.channels);
        let batch = common.dim(0);
        if common.shape()[1..] != [s, s, c] || unique.rank() != 4 || unique.shape()[1..] != [s, s, c] {
            return Err(Error::Shape(format!(
                "joint module expects [_, {s}, {s}, {c}] features, got {:?} and {:?}",
                common.shape(),
                unique.shape()
            )));
        }
        if batch == 0 || unique.dim(0) % batch != 0 {
            return Err(Error::Shape(format!("{} unique maps for a batch of {batch}", unique.dim(0))));
        }
        let frames = unique.dim(0) / batch;
        let stack = frames + 1;

        let z = Tensor::cat(
            &[
                self.norm_c.forward(p, common).reshape(&[batch, 1, s, s, c]),
                self.norm_u.forward(p, unique).reshape(&[batch, frames, s, s, c]),
            ],
            1,
        );
        let qkv = self.qkv.forward(p, &z);
        let (mut q, mut k, mut v) = (qkv.narrow(4, 0, c), qkv.narrow(4, c, c), qkv.narrow(4, 2 * c, c));
        if let (Some(pe), true) = (pe, self.target != PeTarget::None) {
            if pe.side != s || pe.dim != c || pe.frames != frames {
                return Err(Error::Shape(format!(
                    "position tables ({} frames, side {}, dim {}) do not fit {frames} frames at side {s}, dim {c}",
                    pe.frames, pe.side, pe.dim
                )));
            }
            let (eq, ek) = pe.joint(p);
            let (eq, ek) = (eq.reshape(&[1, stack, s, s, c]), ek.reshape(&[1, stack, s, s, c]));
            match self.target {
                PeTarget::Qk => {
                    q = q.add(&eq);
                    k = k.add(&ek);
                }
                PeTarget::Kv => {
                    k = k.add(&ek);
                    v = v.add(&eq);
                }
                PeTarget::None => unreachable!(),
            }
        }

        let (w, b) = (self.blocks, s / self.blocks);
        let tokens = stack * b * b;
        let blockify = |t: &Tensor<T>| {
            t.reshape(&[batch, stack, w, b, w, b, c])
                .permute(&[0, 2, 4, 1, 3, 5, 6])
                .reshape(&[batch * w * w, tokens, c])
        };
        let (out, weights) = multi_head_attention(&blockify(&q), &blockify(&k), &blockify(&v), self.heads);
        let out = out
            .reshape(&[batch, w, w, stack, b, b, c])
            .permute(&[0, 3, 1, 4, 2, 5, 6])
            .reshape(&[batch, stack, s, s, c]);
        let out = self.proj.forward(p, &out);
        let common = common.add(&out.narrow(1, 0, 1).reshape(&[batch, s, s, c]));
        let unique = unique.add(&out.narrow(1, 1, frames).reshape(&[batch * frames, s, s, c]));
        Ok(JointOutput { common, unique, weights })
    }
}
