//! Stage-two denoiser: a commonness UNet over the clip latent and a uniqueness UNet
//! over the frame latents, coupled by joint attention wherever their resolutions meet.

pub mod joint;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{timestep_embedding, Conv2d, GroupNorm, Linear, ResBlock, SpatialAttention, TemporalAttention};
use crate::nn::{seeded_rng, Binding, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use joint::{JointModule, JointOutput, PeTables};

/// Residual block plus the optional spatial and temporal attention that follow it.
#[derive(Clone, Debug)]
struct StreamBlock {
    res: ResBlock,
    attn: Option<SpatialAttention>,
    temporal: Option<TemporalAttention>,
}

impl StreamBlock {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, tdim: usize, attn: bool, temporal: bool) -> Self {
        let mut pb = pb.sub(name);
        let res = ResBlock::new(&mut pb, "res", cin, cout, Some(tdim));
        let attn_layer = attn.then(|| SpatialAttention::new(&mut pb, "attn", cout));
        let temporal = (attn && temporal).then(|| TemporalAttention::new(&mut pb, "tattn", cout));
        Self { res, attn: attn_layer, temporal }
    }

    fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>, temb: &Tensor<T>, frames: usize) -> Tensor<T> {
        let mut h = self.res.forward(p, x, Some(temb));
        if let Some(a) = &self.attn {
            h = a.forward(p, &h);
        }
        if let Some(t) = &self.temporal {
            h = t.forward(p, &h, frames);
        }
        h
    }
}

/// One UNet. Level `i` runs at `sides[i]` with `widths[i]` channels.
#[derive(Clone, Debug)]
pub struct Stream {
    conv_in: Conv2d,
    down_blocks: Vec<Vec<StreamBlock>>,
    downs: Vec<Option<Conv2d>>,
    mid: Vec<StreamBlock>,
    up_blocks: Vec<Vec<StreamBlock>>,
    ups: Vec<Option<Conv2d>>,
    out_norm: GroupNorm,
    out: Conv2d,
    pub sides: Vec<usize>,
    pub widths: Vec<usize>,
    temporal: bool,
}

impl Stream {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cfg: &RunConfig,
        top_side: usize,
        widths: Vec<usize>,
        tdim: usize,
        temporal: bool,
    ) -> Self {
        let mut pb = pb.sub(name);
        let levels = widths.len();
        let sides: Vec<usize> = (0..levels).map(|i| top_side >> i).collect();
        let wants_attn = |side: usize| cfg.attention_resolutions.contains(&side);
        let conv_in = Conv2d::same(&mut pb, "conv_in", cfg.latent_dim, widths[0]);

        let mut skip_widths = vec![widths[0]];
        let mut ch = widths[0];
        let mut down_blocks = Vec::with_capacity(levels);
        let mut downs = Vec::with_capacity(levels);
        for i in 0..levels {
            let mut blocks = Vec::new();
            for r in 0..cfg.num_res_blocks {
                blocks.push(StreamBlock::new(&mut pb, &format!("down{i}.{r}"), ch, widths[i], tdim, wants_attn(sides[i]), temporal));
                ch = widths[i];
                skip_widths.push(ch);
            }
            down_blocks.push(blocks);
            downs.push((i + 1 < levels).then(|| {
                skip_widths.push(ch);
                Conv2d::new(&mut pb, &format!("down{i}.op"), ch, ch, 3, 2, 1, true)
            }));
        }

        let mid = vec![
            StreamBlock::new(&mut pb, "mid.0", ch, ch, tdim, true, temporal),
            StreamBlock::new(&mut pb, "mid.1", ch, ch, tdim, false, temporal),
        ];

        let mut up_blocks = vec![Vec::new(); levels];
        let mut ups = vec![None; levels];
        for i in (0..levels).rev() {
            let mut blocks = Vec::new();
            for r in 0..=cfg.num_res_blocks {
                let skip = skip_widths.pop().expect("one skip per decoder block");
                blocks.push(StreamBlock::new(&mut pb, &format!("up{i}.{r}"), ch + skip, widths[i], tdim, wants_attn(sides[i]), temporal));
                ch = widths[i];
            }
            up_blocks[i] = blocks;
            if i > 0 {
                ups[i] = Some(Conv2d::same(&mut pb, &format!("up{i}.op"), ch, ch));
            }
        }
        let out_norm = GroupNorm::new(&mut pb, "out_norm", ch);
        let out = Conv2d::zeroed(&mut pb, "out", ch, cfg.latent_dim);
        Self { conv_in, down_blocks, downs, mid, up_blocks, ups, out_norm, out, sides, widths, temporal }
    }

    pub fn levels(&self) -> usize {
        self.sides.len()
    }

    pub fn has_temporal_attention(&self) -> bool {
        self.temporal
    }

    fn encode_level<T: Scalar>(&self, p: &Binding<'_, T>, i: usize, x: Tensor<T>, temb: &Tensor<T>, frames: usize, skips: &mut Vec<Tensor<T>>) -> Tensor<T> {
        let mut h = x;
        for b in &self.down_blocks[i] {
            h = b.forward(p, &h, temb, frames);
            skips.push(h.clone());
        }
        h
    }

    fn downsample<T: Scalar>(&self, p: &Binding<'_, T>, i: usize, x: Tensor<T>, skips: &mut Vec<Tensor<T>>) -> Tensor<T> {
        match &self.downs[i] {
            Some(conv) => {
                let h = conv.forward(p, &x);
                skips.push(h.clone());
                h
            }
            None => x,
        }
    }

    fn middle<T: Scalar>(&self, p: &Binding<'_, T>, x: Tensor<T>, temb: &Tensor<T>, frames: usize) -> Tensor<T> {
        self.mid.iter().fold(x, |h, b| b.forward(p, &h, temb, frames))
    }

    fn decode_level<T: Scalar>(&self, p: &Binding<'_, T>, i: usize, x: Tensor<T>, temb: &Tensor<T>, frames: usize, skips: &mut Vec<Tensor<T>>) -> Tensor<T> {
        let mut h = x;
        for b in &self.up_blocks[i] {
            let skip = skips.pop().expect("skip stack matches the decoder");
            h = b.forward(p, &Tensor::cat(&[h, skip], 3), temb, frames);
        }
        h
    }

    fn upsample<T: Scalar>(&self, p: &Binding<'_, T>, i: usize, x: Tensor<T>) -> Tensor<T> {
        match &self.ups[i] {
            Some(conv) => conv.forward(p, &x.upsample_nearest(2)),
            None => x,
        }
    }

    fn head<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        self.out.forward(p, &self.out_norm.forward(p, x).silu())
    }
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Clone, Debug)]
struct TimeMlp {
    l1: Linear,
    l2: Linear,
    base: usize,
}

impl TimeMlp {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, base: usize, dim: usize) -> Self {
        let mut pb = pb.sub("time");
        Self { l1: Linear::new(&mut pb, "l1", base, dim, true), l2: Linear::new(&mut pb, "l2", dim, dim, true), base }
    }

    fn forward<T: Scalar>(&self, p: &Binding<'_, T>, times: &[f64]) -> Tensor<T> {
        self.l2.forward(p, &self.l1.forward(p, &timestep_embedding(times, self.base)).silu())
    }
}

/// Predicted noise for both latent kinds, shaped like the inputs.
#[derive(Clone, Debug)]
pub struct NoisePrediction<T: Scalar> {
    pub common: Tensor<T>,
    pub unique: Tensor<T>,
}

/// Joint module placement: the shared uniqueness level it sits on.
#[derive(Clone, Debug)]
pub struct JointSite {
    pub level: usize,
    pub side: usize,
    pub encoder: JointModule,
    pub decoder: JointModule,
    pub pe: PeTables,
}

/// Per-part times `[u_c, u_1 … u_T]` for every clip of a batch, all equal to `u[b]`.
pub fn shared_times(u: &[f64], frames: usize) -> Vec<f64> {
    u.iter().flat_map(|&u| std::iter::repeat(u).take(frames + 1)).collect()
}

#[derive(Clone, Debug)]
pub struct CuLdm {
    pub cfg: RunConfig,
    time: TimeMlp,
    pub common: Stream,
    pub unique: Stream,
    pub joints: Vec<JointSite>,
    /// Levels the commonness stream runs before its resolution meets the uniqueness stream.
    pub extra: usize,
}

impl CuLdm {
    pub fn build<T: Scalar>(cfg: &RunConfig, pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let md = cfg.model_dim;
        let tdim = 4 * md;
        let time = TimeMlp::new(pb, md.max(2) & !1, tdim);
        let unique_widths: Vec<usize> = cfg.channel_multiplies.iter().map(|m| m * md).collect();
        let extra = cfg.extra_common_levels();
        let common_widths: Vec<usize> = std::iter::repeat(unique_widths[0]).take(extra).chain(unique_widths.iter().copied()).collect();
        let common = Stream::new(pb, "common", cfg, cfg.common_side(), common_widths, tdim, false);
        let unique = Stream::new(pb, "unique", cfg, cfg.unique_side(), unique_widths, tdim, true);

        let mut joints = Vec::new();
        if cfg.joint_modules {
            for (level, &side) in unique.sides.iter().enumerate() {
                if common.sides[extra + level] != side {
                    return Err(Error::Config(format!("stream resolutions do not meet at side {side}")));
                }
                let ch = unique.widths[level];
                // deeper levels may be too small to split; they attend globally
                let blocks = if side % cfg.block_factor == 0 { cfg.block_factor } else { 1 };
                let mut pb = pb.sub(&format!("joint{level}"));
                joints.push(JointSite {
                    level,
                    side,
                    encoder: JointModule::new(&mut pb, "enc", ch, side, blocks, cfg.pe_target)?,
                    decoder: JointModule::new(&mut pb, "dec", ch, side, blocks, cfg.pe_target)?,
                    pe: PeTables::new(&mut pb, "pe", side, cfg.frames, ch),
                });
            }
            if joints.is_empty() {
                return Err(Error::Config("no resolution is shared by the two streams".into()));
            }
        }
        Ok(Self { cfg: cfg.clone(), time, common, unique, joints, extra })
    }

    fn joint_at(&self, level: usize) -> Option<&JointSite> {
        self.joints.iter().find(|j| j.level == level)
    }

    /// Joint modules in the order they run, each with its site: encoder half top-down,
    /// then decoder half bottom-up.
    pub fn joint_order(&self) -> Vec<(&JointSite, &JointModule)> {
        let levels = self.unique.levels();
        let enc = (0..levels).filter_map(|l| self.joint_at(l).map(|s| (s, &s.encoder)));
        let dec = (0..levels).rev().filter_map(|l| self.joint_at(l).map(|s| (s, &s.decoder)));
        enc.chain(dec).collect()
    }

    /// `common` is `[B, hc, wc, D]`, `unique` is `[B·T, hu, wu, D]` and `times` holds
    /// `B·(T+1)` per-part times laid out as `[u_c, u_1 … u_T]` per clip.
    pub fn predict_noise<T: Scalar>(&self, p: &Binding<'_, T>, common: &Tensor<T>, unique: &Tensor<T>, times: &[f64]) -> Result<NoisePrediction<T>> {
        self.forward(p, common, unique, times, None)
    }

    /// Like [`predict_noise`](Self::predict_noise), also collecting every joint module's
    /// attention weights in execution order.
    pub fn predict_noise_with_attention<T: Scalar>(
        &self,
        p: &Binding<'_, T>,
        common: &Tensor<T>,
        unique: &Tensor<T>,
        times: &[f64],
    ) -> Result<(NoisePrediction<T>, Vec<Tensor<T>>)> {
        let mut maps = Vec::new();
        let out = self.forward(p, common, unique, times, Some(&mut maps))?;
        Ok((out, maps))
    }

    fn check_inputs<T: Scalar>(&self, common: &Tensor<T>, unique: &Tensor<T>, times: &[f64]) -> Result<(usize, usize)> {
        let [hc, wc, d] = self.cfg.common_shape();
        let [_, hu, wu, _] = self.cfg.unique_shape();
        let t = self.cfg.frames;
        let b = common.dim(0);
        if common.rank() != 4 || common.shape()[1..] != [hc, wc, d] || b == 0 {
            return Err(Error::Shape(format!("noisy common {:?} is not [B, {hc}, {wc}, {d}]", common.shape())));
        }
        if unique.rank() != 4 || unique.shape() != [b * t, hu, wu, d] {
            return Err(Error::Shape(format!("noisy unique {:?} is not [{}, {hu}, {wu}, {d}]", unique.shape(), b * t)));
        }
        if times.len() != b * (t + 1) {
            return Err(Error::Shape(format!("{} times given, need {}", times.len(), b * (t + 1))));
        }
        if let Some(u) = times.iter().find(|u| !(0.0..=1.0).contains(*u)) {
            return Err(Error::Domain(format!("time {u} outside [0, 1]")));
        }
        Ok((b, t))
    }

    fn forward<T: Scalar>(
        &self,
        p: &Binding<'_, T>,
        common: &Tensor<T>,
        unique: &Tensor<T>,
        times: &[f64],
        mut maps: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<NoisePrediction<T>> {
        let (b, t) = self.check_inputs(common, unique, times)?;
        let temb = self.time.forward(p, times).reshape(&[b, t + 1, self.time.l2.out_dim]);
        let temb_c = temb.narrow(1, 0, 1).reshape(&[b, self.time.l2.out_dim]);
        let temb_u = temb.narrow(1, 1, t).reshape(&[b * t, self.time.l2.out_dim]);
        let (cs, us) = (&self.common, &self.unique);
        let e = self.extra;

        let mut joint = |site: &JointSite, enc: bool, hc: Tensor<T>, hu: Tensor<T>| -> Result<(Tensor<T>, Tensor<T>)> {
            let m = if enc { &site.encoder } else { &site.decoder };
            let out = m.forward(p, &hc, &hu, Some(&site.pe))?;
            if let Some(maps) = maps.as_deref_mut() {
                maps.push(out.weights);
            }
            Ok((out.common, out.unique))
        };

        let mut skips_c = Vec::new();
        let mut skips_u = Vec::new();
        let mut hc = cs.conv_in.forward(p, common);
        let mut hu = us.conv_in.forward(p, unique);
        skips_c.push(hc.clone());
        skips_u.push(hu.clone());
        for i in 0..e {
            hc = cs.encode_level(p, i, hc, &temb_c, 1, &mut skips_c);
            hc = cs.downsample(p, i, hc, &mut skips_c);
        }
        for l in 0..us.levels() {
            hc = cs.encode_level(p, e + l, hc, &temb_c, 1, &mut skips_c);
            hu = us.encode_level(p, l, hu, &temb_u, t, &mut skips_u);
            if let Some(site) = self.joint_at(l) {
                (hc, hu) = joint(site, true, hc, hu)?;
                // the skip carries the jointly updated features
                *skips_c.last_mut().unwrap() = hc.clone();
                *skips_u.last_mut().unwrap() = hu.clone();
            }
            hc = cs.downsample(p, e + l, hc, &mut skips_c);
            hu = us.downsample(p, l, hu, &mut skips_u);
        }
        hc = cs.middle(p, hc, &temb_c, 1);
        hu = us.middle(p, hu, &temb_u, t);
        for l in (0..us.levels()).rev() {
            hc = cs.decode_level(p, e + l, hc, &temb_c, 1, &mut skips_c);
            hu = us.decode_level(p, l, hu, &temb_u, t, &mut skips_u);
            if let Some(site) = self.joint_at(l) {
                (hc, hu) = joint(site, false, hc, hu)?;
            }
            hc = cs.upsample(p, e + l, hc);
            hu = us.upsample(p, l, hu);
        }
        for i in (0..e).rev() {
            hc = cs.decode_level(p, i, hc, &temb_c, 1, &mut skips_c);
            hc = cs.upsample(p, i, hc);
        }
        debug_assert!(skips_c.is_empty() && skips_u.is_empty());
        Ok(NoisePrediction { common: cs.head(p, &hc), unique: us.head(p, &hu) })
    }
}

/// Per-kind scalar applied to latents before diffusion so both have roughly unit spread.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentScale {
    pub common: f32,
    pub unique: f32,
}

impl Default for LatentScale {
    fn default() -> Self {
        Self { common: 1.0, unique: 1.0 }
    }
}

impl LatentScale {
    /// Reciprocal standard deviations of the given latents (1 where the spread vanishes).
    pub fn fit<'a>(latents: impl IntoIterator<Item = (&'a [f32], &'a [f32])>) -> Self {
        let mut acc = [(0.0f64, 0.0f64, 0usize); 2];
        for (c, u) in latents {
            for (a, xs) in acc.iter_mut().zip([c, u]) {
                for &x in xs {
                    a.0 += x as f64;
                    a.1 += (x as f64).powi(2);
                    a.2 += 1;
                }
            }
        }
        let inv = |(s, sq, n): (f64, f64, usize)| {
            if n < 2 {
                return 1.0;
            }
            let mean = s / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            if var > 1e-12 {
                (1.0 / var.sqrt()) as f32
            } else {
                1.0
            }
        };
        Self { common: inv(acc[0]), unique: inv(acc[1]) }
    }
}

/// Architecture, parameters and the latent scaling it was trained with.
#[derive(Clone, Debug)]
pub struct LdmModel {
    pub arch: CuLdm,
    pub params: ParamStore<f32>,
    pub scale: LatentScale,
}

impl LdmModel {
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let arch = CuLdm::build(cfg, &mut ParamBuilder::new(&mut params, &mut rng))?;
        Ok(Self { arch, params, scale: LatentScale::default() })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.arch.cfg
    }
}

#[cfg(test)]
mod tests;
