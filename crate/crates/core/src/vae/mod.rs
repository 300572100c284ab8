//! Stage-one autoencoder: a commonness encoder (one latent per clip), a uniqueness
//! encoder (one latent per frame), a cascading merge and a per-frame decoder.

pub mod disc;
pub mod loss;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clip::VideoClip;
use crate::config::RunConfig;
use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ResBlock, TemporalAttention};
use crate::nn::{seeded_rng, Binding, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
/// Initial log-variance bias of both encoders.
pub const LOGVAR_INIT: f64 = -6.0;

/// Feature width at downsampling level `level` (0 = full resolution).
fn width(hidden: usize, level: usize) -> usize {
    hidden >> (2 - level.min(2))
}

/// Mean, clamped log-variance and a reparameterised sample.
#[derive(Clone, Debug)]
pub struct GaussianLatent<T: Scalar> {
    pub mean: Tensor<T>,
    pub logvar: Tensor<T>,
    pub sample: Tensor<T>,
}

impl<T: Scalar> GaussianLatent<T> {
    /// Splits `[.., 2D]` into mean/logvar and draws `mean + exp(logvar/2)·η`.
    /// Without an RNG the sample is the mean.
    fn from_moments(moments: &Tensor<T>, dim: usize, rng: Option<&mut ChaCha8Rng>) -> Self {
        let axis = moments.rank() - 1;
        let mean = moments.narrow(axis, 0, dim);
        let logvar = moments.narrow(axis, dim, dim).clamp(LOGVAR_MIN, LOGVAR_MAX);
        let sample = match rng {
            Some(rng) => {
                let eta = Tensor::from_vec(mean.shape(), standard_normal(rng, mean.numel()));
                mean.add(&logvar.scale(0.5).exp().mul(&eta))
            }
            None => mean.clone(),
        };
        Self { mean, logvar, sample }
    }
}

/// Stride-2 convolution chain from RGB frames down by `factor`.
#[derive(Clone, Debug)]
struct DownChain {
    convs: Vec<Conv2d>,
}

impl DownChain {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, hidden: usize, factor: usize) -> Self {
        let levels = factor.trailing_zeros() as usize;
        let convs = (0..levels)
            .map(|i| {
                let cin = if i == 0 { 3 } else { width(hidden, i) };
                Conv2d::new(pb, &format!("down{i}"), cin, width(hidden, i + 1), 3, 2, 1, true)
            })
            .collect();
        Self { convs }
    }

    fn out_width(&self) -> usize {
        self.convs.last().map(|c| c.cout).unwrap_or(3)
    }

    fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(p, &h).silu();
        }
        h
    }
}

/// Residual layers followed by a projection to `2·D` moment channels.
#[derive(Clone, Debug)]
struct MomentHead {
    res: Vec<ResBlock>,
    out: Conv2d,
}

impl MomentHead {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, layers: usize, latent_dim: usize) -> Self {
        let res = (0..layers).map(|i| ResBlock::new(pb, &format!("res{i}"), channels, channels, None)).collect();
        let out = Conv2d::same(pb, "moments", channels, 2 * latent_dim);
        let bias = out.bias().expect("moment conv has a bias");
        pb.store_mut().get_mut(bias).data[latent_dim..].fill(T::of(LOGVAR_INIT));
        Self { res, out }
    }

    // no normalisation before the projection: it would erase the absolute colour level
    fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for r in &self.res {
            h = r.forward(p, &h, None);
        }
        self.out.forward(p, &h.silu())
    }
}

/// Per-frame features at 1/f_c, concatenated over time and reduced by a learned
/// pointwise map `g: T·C → C`.
#[derive(Clone, Debug)]
pub struct CommonEncoder {
    down: DownChain,
    reduce: Conv2d,
    head: MomentHead,
    channels: usize,
}

impl CommonEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &RunConfig) -> Self {
        let mut pb = pb.sub("enc_c");
        let down = DownChain::new(&mut pb, cfg.vae_hidden, cfg.f_c);
        let channels = width(cfg.vae_hidden, cfg.f_c.trailing_zeros() as usize);
        let reduce = Conv2d::pointwise(&mut pb, "reduce", cfg.frames * down.out_width(), channels);
        let head = MomentHead::new(&mut pb, channels, cfg.vae_res_layers, cfg.latent_dim);
        Self { down, reduce, head, channels }
    }

    /// `x` is `[T, H, W, 3]`; returns moments `[1, H/f_c, W/f_c, 2D]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        let feats = self.down.forward(p, x);
        let (t, h, w, c) = (feats.dim(0), feats.dim(1), feats.dim(2), feats.dim(3));
        // [T, h, w, C] -> [1, h, w, T·C] with frame-major channel blocks
        let stacked = feats.permute(&[1, 2, 0, 3]).reshape(&[1, h, w, t * c]);
        let reduced = self.reduce.forward(p, &stacked).silu();
        self.head.forward(p, &reduced)
    }
}

/// Per-frame features at 1/f_u, temporal self-attention, residual layers.
#[derive(Clone, Debug)]
pub struct UniqueEncoder {
    down: DownChain,
    attn: TemporalAttention,
    head: MomentHead,
}

impl UniqueEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &RunConfig) -> Self {
        let mut pb = pb.sub("enc_u");
        let down = DownChain::new(&mut pb, cfg.vae_hidden, cfg.f_u);
        let channels = down.out_width();
        let attn = TemporalAttention::new(&mut pb, "tattn", channels);
        let head = MomentHead::new(&mut pb, channels, cfg.vae_res_layers, cfg.latent_dim);
        Self { down, attn, head }
    }

    /// `x` is `[T, H, W, 3]`; returns moments `[T, H/f_u, W/f_u, 2D]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        self.forward_with_weights(p, x).0
    }

    /// Also returns the temporal attention weights `[sites·heads, T, T]`.
    pub fn forward_with_weights<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let feats = self.down.forward(p, x);
        let frames = x.dim(0);
        let (h, weights) = self.attn.forward_with_weights(p, &feats, frames);
        (self.head.forward(p, &h), weights)
    }
}

/// Fuses a common latent with one unique latent per frame over the resolution ladder
/// `H/f_u, 2·H/f_u, …, H/f_c`.
#[derive(Clone, Debug)]
pub struct MergeCascade {
    rungs: Vec<(Conv2d, Conv2d)>,
    unique_side: usize,
    latent_dim: usize,
    pub channels: usize,
}

impl MergeCascade {
    /// `levels` extra rungs above the unique resolution (log2(f_u/f_c)).
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        latent_dim: usize,
        channels: usize,
        unique_side: usize,
        levels: usize,
        bias: bool,
    ) -> Self {
        let mut pb = pb.sub("merge");
        let rungs = (0..=levels)
            .map(|k| {
                let a = Conv2d::new(&mut pb, &format!("rung{k}.a"), 2 * latent_dim, channels, 3, 1, 1, bias);
                let b = Conv2d::new(&mut pb, &format!("rung{k}.b"), channels, channels, 3, 1, 1, bias);
                (a, b)
            })
            .collect();
        Self { rungs, unique_side, latent_dim, channels }
    }

    pub fn ladder(&self) -> Vec<usize> {
        (0..self.rungs.len()).map(|k| self.unique_side << k).collect()
    }

    /// `common` is `[1, H/f_c, W/f_c, D]`, `unique` is `[N, H/f_u, W/f_u, D]`;
    /// returns `[N, H/f_c, W/f_c, channels]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, common: &Tensor<T>, unique: &Tensor<T>) -> Result<Tensor<T>> {
        let top = self.rungs.len() - 1;
        let common_side = self.unique_side << top;
        if common.rank() != 4 || unique.rank() != 4 {
            return Err(Error::Shape("merge expects rank-4 latents".into()));
        }
        if common.dim(3) != self.latent_dim || unique.dim(3) != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent widths {} and {} do not match D = {}",
                common.dim(3),
                unique.dim(3),
                self.latent_dim
            )));
        }
        if common.dim(0) != 1 || common.dim(1) != common_side || common.dim(2) != common_side {
            return Err(Error::Shape(format!("common latent {:?} is not [1, {common_side}, {common_side}, D]", common.shape())));
        }
        if unique.dim(1) != self.unique_side || unique.dim(2) != self.unique_side {
            return Err(Error::Shape(format!("unique latent {:?} has the wrong spatial size", unique.shape())));
        }
        let n = unique.dim(0);
        let mut acc: Option<Tensor<T>> = None;
        for (k, (a, b)) in self.rungs.iter().enumerate() {
            let side = self.unique_side << k;
            let c = common.avg_pool(1 << (top - k));
            let c = c.broadcast_to(&[n, side, side, self.latent_dim]);
            let u = unique.upsample_nearest(1 << k);
            let m = b.forward(p, &a.forward(p, &Tensor::cat(&[c, u], 3)).silu());
            acc = Some(match acc {
                None => m,
                Some(prev) => prev.upsample_nearest(2).add(&m),
            });
        }
        Ok(acc.expect("at least one rung"))
    }
}

/// Time-agnostic frame decoder: residual layers at 1/f_c then `log2(f_c)` upsampling stages.
#[derive(Clone, Debug)]
pub struct FrameDecoder {
    res: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    out: Conv2d,
}

impl FrameDecoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &RunConfig, channels: usize) -> Self {
        let mut pb = pb.sub("dec");
        let res = (0..cfg.vae_res_layers)
            .map(|i| ResBlock::new(&mut pb, &format!("res{i}"), channels, channels, None))
            .collect();
        let levels = cfg.f_c.trailing_zeros() as usize;
        let mut cin = channels;
        let ups = (0..levels)
            .map(|i| {
                let cout = width(cfg.vae_hidden, levels - 1 - i);
                let conv = Conv2d::same(&mut pb, &format!("up{i}"), cin, cout);
                cin = cout;
                conv
            })
            .collect();
        let out = Conv2d::same(&mut pb, "out", cin, 3);
        Self { res, ups, out }
    }

    /// `[N, H/f_c, W/f_c, C]` → unclamped frames `[N, H, W, 3]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, fused: &Tensor<T>) -> Tensor<T> {
        let mut h = fused.clone();
        for r in &self.res {
            h = r.forward(p, &h, None);
        }
        for up in &self.ups {
            h = up.forward(p, &h.upsample_nearest(2)).silu();
        }
        self.out.forward(p, &h)
    }
}

/// The full autoencoder architecture; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct CuVae {
    pub cfg: RunConfig,
    pub enc_c: CommonEncoder,
    pub enc_u: UniqueEncoder,
    pub merge: MergeCascade,
    pub dec: FrameDecoder,
}

/// Latents of one clip as produced by both encoders.
#[derive(Clone, Debug)]
pub struct Encoded<T: Scalar> {
    pub common: GaussianLatent<T>,
    pub unique: GaussianLatent<T>,
}

impl CuVae {
    pub fn build<T: Scalar>(cfg: &RunConfig, pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let enc_c = CommonEncoder::new(pb, cfg);
        let enc_u = UniqueEncoder::new(pb, cfg);
        let channels = enc_c.channels;
        let merge = MergeCascade::new(pb, cfg.latent_dim, channels, cfg.unique_side(), cfg.extra_common_levels(), true);
        let dec = FrameDecoder::new(pb, cfg, channels);
        Ok(Self { cfg: cfg.clone(), enc_c, enc_u, merge, dec })
    }

    fn check_clip<T: Scalar>(&self, x: &Tensor<T>, need_full_length: bool) -> Result<()> {
        let res = self.cfg.resolution;
        if x.rank() != 4 || x.dim(1) != res || x.dim(2) != res || x.dim(3) != 3 {
            return Err(Error::Shape(format!("clip {:?} is not [T, {res}, {res}, 3]", x.shape())));
        }
        if x.dim(0) == 0 {
            return Err(Error::Shape("clip has no frames".into()));
        }
        if need_full_length && x.dim(0) != self.cfg.frames {
            return Err(Error::Shape(format!(
                "clip has {} frames; the commonness encoder is built for {}",
                x.dim(0),
                self.cfg.frames
            )));
        }
        Ok(())
    }

    pub fn encode_common<T: Scalar>(
        &self,
        p: &Binding<'_, T>,
        x: &Tensor<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GaussianLatent<T>> {
        self.check_clip(x, true)?;
        Ok(GaussianLatent::from_moments(&self.enc_c.forward(p, x), self.cfg.latent_dim, rng))
    }

    pub fn encode_unique<T: Scalar>(
        &self,
        p: &Binding<'_, T>,
        x: &Tensor<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GaussianLatent<T>> {
        self.check_clip(x, false)?;
        Ok(GaussianLatent::from_moments(&self.enc_u.forward(p, x), self.cfg.latent_dim, rng))
    }

    /// Encodes both latent kinds. With an RNG both are sampled (common first).
    pub fn encode<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>, mut rng: Option<&mut ChaCha8Rng>) -> Result<Encoded<T>> {
        let common = self.encode_common(p, x, rng.as_deref_mut())?;
        let unique = self.encode_unique(p, x, rng)?;
        Ok(Encoded { common, unique })
    }

    /// Unclamped frames for the given latents, one per unique latent.
    pub fn decode<T: Scalar>(&self, p: &Binding<'_, T>, common: &Tensor<T>, unique: &Tensor<T>) -> Result<Tensor<T>> {
        let fused = self.merge.forward(p, common, unique)?;
        Ok(self.dec.forward(p, &fused))
    }
}

/// One clip's latents with the hash of the autoencoder config that produced them.
#[derive(Clone, Debug)]
pub struct LatentBundle {
    /// `[1, H/f_c, W/f_c, D]`
    pub common: Tensor<f32>,
    /// `[T, H/f_u, W/f_u, D]`
    pub unique: Tensor<f32>,
    pub config_hash: String,
}

impl LatentBundle {
    pub fn new(common: Tensor<f32>, unique: Tensor<f32>, config_hash: String) -> Self {
        Self { common, unique, config_hash }
    }

    pub fn frames(&self) -> usize {
        self.unique.dim(0)
    }

    pub fn check_shapes(&self, cfg: &RunConfig) -> Result<()> {
        let [h, w, d] = cfg.common_shape();
        if self.common.shape() != [1, h, w, d] {
            return Err(Error::Shape(format!("common latent {:?} is not [1, {h}, {w}, {d}]", self.common.shape())));
        }
        let [_, hu, wu, du] = cfg.unique_shape();
        let s = self.unique.shape();
        if s.len() != 4 || s[0] == 0 || s[1..] != [hu, wu, du] {
            return Err(Error::Shape(format!("unique latents {s:?} are not [T, {hu}, {wu}, {du}]")));
        }
        Ok(())
    }
}

/// Architecture plus trained parameters.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub arch: CuVae,
    pub params: ParamStore<f32>,
}

impl VaeModel {
    /// Fresh weights drawn from `seed`.
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let arch = CuVae::build(cfg, &mut ParamBuilder::new(&mut params, &mut rng))?;
        Ok(Self { arch, params })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.arch.cfg
    }

    fn clip_tensor(&self, clip: &VideoClip) -> Result<Tensor<f32>> {
        clip.validate(self.cfg().f_u)?;
        Ok(clip.to_tensor())
    }

    /// Posterior means of both latent kinds.
    pub fn encode(&self, clip: &VideoClip) -> Result<LatentBundle> {
        let x = self.clip_tensor(clip)?;
        let p = Binding::frozen(&self.params);
        let enc = self.arch.encode(&p, &x, None)?;
        Ok(LatentBundle::new(enc.common.mean, enc.unique.mean, self.cfg().vae_hash()))
    }

    /// Decodes a bundle to a clip clamped to [0, 1].
    pub fn decode(&self, bundle: &LatentBundle) -> Result<VideoClip> {
        bundle.check_shapes(self.cfg())?;
        let p = Binding::frozen(&self.params);
        let frames = self.arch.decode(&p, &bundle.common, &bundle.unique)?;
        VideoClip::from_tensor(&frames.clamp(0.0, 1.0))
    }

    pub fn reconstruct(&self, clip: &VideoClip) -> Result<VideoClip> {
        self.decode(&self.encode(clip)?)
    }

    /// `a`'s common latent decoded with `b`'s unique sequence.
    pub fn swap_recompose(&self, a: &VideoClip, b: &VideoClip) -> Result<VideoClip> {
        let ea = self.encode(a)?;
        let eb = self.encode(b)?;
        self.decode(&LatentBundle::new(ea.common, eb.unique, ea.config_hash))
    }
}

/// `count` distinct sorted frame indices out of `frames`.
pub fn pick_frames<R: Rng>(rng: &mut R, frames: usize, count: usize) -> Vec<usize> {
    if count == 0 || count >= frames {
        return (0..frames).collect();
    }
    let mut idx = rand::seq::index::sample(rng, frames, count).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests;
