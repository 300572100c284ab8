//! Building blocks shared by the autoencoder, the discriminator and the denoiser.

use crate::nn::params::{Binding, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Number of normalisation groups used for `channels` feature maps.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_bound(pb, name, in_dim, out_dim, bias, bound)
    }

    /// Zero-initialised weights and bias.
    pub fn zeroed<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_bound(pb, name, in_dim, out_dim, bias, 0.0)
    }

    fn with_bound<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        bound: f64,
    ) -> Self {
        let mut pb = pb.sub(name);
        let w = pb.uniform("weight", &[in_dim, out_dim], bound);
        let b = bias.then(|| pb.uniform("bias", &[out_dim], bound));
        Self { w, b, in_dim, out_dim }
    }

    /// `x` is `[..., in_dim]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        let shape = x.shape().to_vec();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear input width");
        let rows = x.numel() / self.in_dim;
        let y = x.reshape(&[rows, self.in_dim]).matmul(&p.get(self.w));
        let y = match self.b {
            Some(b) => y.add(&p.get(b)),
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        // He-uniform: keeps activation scale through stacks without normalisation
        let bound = (6.0 / (cin * kernel * kernel) as f64).sqrt();
        Self::with_bound(pb, name, cin, cout, kernel, stride, pad, bias, bound)
    }

    /// 3×3, stride 1, same padding.
    pub fn same<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(pb, name, cin, cout, 3, 1, 1, true)
    }

    pub fn pointwise<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(pb, name, cin, cout, 1, 1, 0, true)
    }

    /// 3×3 same-padding conv with zero weights and bias.
    pub fn zeroed<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        Self::with_bound(pb, name, cin, cout, 3, 1, 1, true, 0.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_bound<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        bound: f64,
    ) -> Self {
        let mut pb = pb.sub(name);
        let w = pb.uniform("weight", &[kernel, kernel, cin, cout], bound);
        let b = bias.then(|| pb.zeros("bias", &[cout]));
        Self { w, b, stride, pad, cin, cout }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        let y = x.conv2d(&p.get(self.w), self.stride, self.pad);
        match self.b {
            Some(b) => y.add(&p.get(b)),
            None => y,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

/// Group normalisation with per-channel affine terms.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        let gamma = pb.constant("gamma", &[channels], 1.0);
        let beta = pb.zeros("beta", &[channels]);
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        x.group_norm(self.groups, 1e-5).mul(&p.get(self.gamma)).add(&p.get(self.beta))
    }
}

/// Pre-norm residual block with optional time modulation (scale/shift after the second norm).
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    time: Option<Linear>,
    pub cout: usize,
}

impl ResBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, time_dim: Option<usize>) -> Self {
        let mut pb = pb.sub(name);
        let norm1 = GroupNorm::new(&mut pb, "norm1", cin);
        let conv1 = Conv2d::same(&mut pb, "conv1", cin, cout);
        let time = time_dim.map(|d| Linear::new(&mut pb, "time", d, 2 * cout, true));
        let norm2 = GroupNorm::new(&mut pb, "norm2", cout);
        // identity at init, as in the usual diffusion UNet blocks
        let conv2 = Conv2d::zeroed(&mut pb, "conv2", cout, cout);
        let skip = (cin != cout).then(|| Conv2d::pointwise(&mut pb, "skip", cin, cout));
        Self { norm1, conv1, norm2, conv2, skip, time, cout }
    }

    /// `x` is `[N, H, W, Cin]`; `temb` (when configured) is `[N, time_dim]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>, temb: Option<&Tensor<T>>) -> Tensor<T> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x).silu());
        let mut h = self.norm2.forward(p, &h);
        if let (Some(lin), Some(temb)) = (&self.time, temb) {
            let n = x.dim(0);
            let ss = lin.forward(p, &temb.silu()).reshape(&[n, 1, 1, 2 * self.cout]);
            let scale = ss.narrow(3, 0, self.cout);
            let shift = ss.narrow(3, self.cout, self.cout);
            h = h.mul(&scale.add_scalar(1.0)).add(&shift);
        }
        let h = self.conv2.forward(p, &h.silu());
        let skip = match &self.skip {
            Some(s) => s.forward(p, x),
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// Multi-head softmax attention over `[B, L, C]` tokens.
///
/// Returns the attended values and the attention weights `[B·heads, L, L]`.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (b, l, c) = (q.dim(0), q.dim(1), q.dim(2));
    assert!(c % heads == 0, "{c} channels not divisible by {heads} heads");
    let dh = c / heads;
    let split = |t: &Tensor<T>| {
        if heads == 1 {
            t.clone()
        } else {
            t.reshape(&[b, l, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, l, dh])
        }
    };
    let (qh, kh, vh) = (split(q), split(k), split(v));
    let weights = qh.matmul_t(&kh).scale(1.0 / (dh as f64).sqrt()).softmax();
    let out = weights.matmul(&vh);
    let out = if heads == 1 {
        out
    } else {
        out.reshape(&[b, heads, l, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, l, c])
    };
    (out, weights)
}

/// Heads used for a `channels`-wide attention layer.
pub fn head_count(channels: usize) -> usize {
    let h = (channels / 32).max(1);
    if channels % h == 0 {
        h
    } else {
        1
    }
}

/// Self-attention over the spatial positions of each `[N, H, W, C]` map.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
    channels: usize,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        let norm = GroupNorm::new(&mut pb, "norm", channels);
        let qkv = Linear::new(&mut pb, "qkv", channels, 3 * channels, true);
        let proj = Linear::zeroed(&mut pb, "proj", channels, channels, true);
        Self { norm, qkv, proj, heads: head_count(channels), channels }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let tokens = self.norm.forward(p, x).reshape(&[n, h * w, c]);
        let (out, _) = attend_qkv(&self.qkv, p, &tokens, self.channels, self.heads);
        x.add(&self.proj.forward(p, &out).reshape(&[n, h, w, c]))
    }
}

fn attend_qkv<T: Scalar>(
    qkv: &Linear,
    p: &Binding<'_, T>,
    tokens: &Tensor<T>,
    c: usize,
    heads: usize,
) -> (Tensor<T>, Tensor<T>) {
    let qkv = qkv.forward(p, tokens);
    let q = qkv.narrow(2, 0, c);
    let k = qkv.narrow(2, c, c);
    let v = qkv.narrow(2, 2 * c, c);
    multi_head_attention(&q, &k, &v, heads)
}

/// Self-attention along time at every spatial site.
///
/// Input is `[B·T, H, W, C]` with frames of one clip contiguous.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
    channels: usize,
}

impl TemporalAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        let norm = GroupNorm::new(&mut pb, "norm", channels);
        let qkv = Linear::new(&mut pb, "qkv", channels, 3 * channels, true);
        let proj = Linear::zeroed(&mut pb, "proj", channels, channels, true);
        Self { norm, qkv, proj, heads: head_count(channels), channels }
    }

    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>, frames: usize) -> Tensor<T> {
        self.forward_with_weights(p, x, frames).0
    }

    /// Also returns the attention weights `[B·H·W·heads, T, T]`.
    pub fn forward_with_weights<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>, frames: usize) -> (Tensor<T>, Tensor<T>) {
        let (bt, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert!(frames >= 1 && bt % frames == 0, "batch {bt} is not a multiple of {frames} frames");
        let b = bt / frames;
        let tokens = x
            .reshape(&[b, frames, h * w, c])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * h * w, frames, c]);
        let normed = self.norm.forward(p, &tokens);
        let (out, weights) = attend_qkv(&self.qkv, p, &normed, self.channels, self.heads);
        let out = self
            .proj
            .forward(p, &out)
            .reshape(&[b, h * w, frames, c])
            .permute(&[0, 2, 1, 3])
            .reshape(&[bt, h, w, c]);
        (x.add(&out), weights)
    }
}

/// Sinusoidal embedding of continuous times `u ∈ [0, 1]`, one row per entry.
pub fn timestep_embedding<T: Scalar>(times: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim % 2 == 0 && dim >= 2);
    let half = dim / 2;
    let mut out = Vec::with_capacity(times.len() * dim);
    for &u in times {
        // scale to the familiar 0..1000 step range so low frequencies stay informative
        let t = u * 1000.0;
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        out.extend(freqs.iter().map(|f| T::of((t * f).cos())));
        out.extend(freqs.iter().map(|f| T::of((t * f).sin())));
    }
    Tensor::from_vec(&[times.len(), dim], out)
}
