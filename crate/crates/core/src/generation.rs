//! Reverse-diffusion sampling: unconditional clips, iterative extension with the six
//! conditional-latent strategies, and common↔unique conditional generation.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::diffusion::{standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ldm::LdmModel;
use crate::nn::{seeded_rng, Binding};
use crate::tensor::Tensor;
use crate::vae::LatentBundle;

/// Anything that predicts `(ε̂_c, ε̂_u)` for one clip from noisy latents and per-part times.
pub trait Denoiser {
    fn cfg(&self) -> &RunConfig;
    /// `common` is one `[hc, wc, D]` latent, `unique` holds `T` frame latents and
    /// `times` is `[u_c, u_1 … u_T]`.
    fn predict(&self, common: &[f32], unique: &[f32], times: &[f64]) -> Result<(Vec<f32>, Vec<f32>)>;
}

impl Denoiser for LdmModel {
    fn cfg(&self) -> &RunConfig {
        LdmModel::cfg(self)
    }

    fn predict(&self, common: &[f32], unique: &[f32], times: &[f64]) -> Result<(Vec<f32>, Vec<f32>)> {
        let cfg = self.cfg();
        let [h, w, d] = cfg.common_shape();
        let [t, hu, wu, _] = cfg.unique_shape();
        let p = Binding::frozen(&self.params);
        let out = self.arch.predict_noise(
            &p,
            &Tensor::from_vec(&[1, h, w, d], common.to_vec()),
            &Tensor::from_vec(&[t, hu, wu, d], unique.to_vec()),
            times,
        )?;
        Ok((out.common.to_vec(), out.unique.to_vec()))
    }
}

/// How the conditional latents of an extension window behave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Strategy(u8);

impl Strategy {
    /// Fully frozen conditionals, the best-scoring variant.
    pub const DEFAULT: Strategy = Strategy(6);

    pub fn new(id: u8) -> Result<Self> {
        if (1..=6).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::Config(format!("sampling strategy must be 1..6, got {id}")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// The common latent is denoised along with the targets.
    pub fn common_evolves(self) -> bool {
        matches!(self.0, 1 | 2 | 4 | 5)
    }

    /// The conditional unique latents are denoised along with the targets.
    pub fn unique_evolves(self) -> bool {
        matches!(self.0, 1..=3)
    }

    /// The common latent goes back to its starting value once a window is finished.
    pub fn resets_common(self) -> bool {
        matches!(self.0, 2 | 5)
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let id = s.parse().map_err(|_| Error::Config(format!("sampling strategy must be 1..6, got {s:?}")))?;
        Self::new(id)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Conditional latents after one denoising step or at a window boundary.
///
/// `start` holds the values the window began with; frozen parts are returned unchanged,
/// evolving parts take `stepped`, and at a boundary strategies 2 and 5 restore the common start.
pub fn apply_strategy(
    strategy: Strategy,
    start: (&[f32], &[f32]),
    current: (&[f32], &[f32]),
    stepped: (&[f32], &[f32]),
    boundary: bool,
) -> (Vec<f32>, Vec<f32>) {
    let common = if boundary && strategy.resets_common() {
        start.0.to_vec()
    } else if strategy.common_evolves() {
        stepped.0.to_vec()
    } else {
        current.0.to_vec()
    };
    let unique = if strategy.unique_evolves() { stepped.1.to_vec() } else { current.1.to_vec() };
    (common, unique)
}

/// Sampler settings shared by all pipelines.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub schedule: NoiseSchedule,
    pub stride: usize,
    /// Multiplier on the ancestral noise; 0 follows the posterior means.
    pub noise_scale: f64,
}

/// Which parts of the joint latent are denoised; the rest stay clean with time 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMask {
    pub common: bool,
    pub unique: Vec<bool>,
}

impl PartMask {
    pub fn all(frames: usize) -> Self {
        Self { common: true, unique: vec![true; frames] }
    }

    /// Length `T+1`: common first.
    pub fn as_vec(&self) -> Vec<bool> {
        std::iter::once(self.common).chain(self.unique.iter().copied()).collect()
    }
}

impl Sampler {
    pub fn new(cfg: &RunConfig, stride: usize) -> Result<Self> {
        let schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        schedule.stride_plan(stride)?;
        Ok(Self { schedule, stride, noise_scale: 1.0 })
    }

    /// Runs the reverse chain from S to 0 on the free parts of `(common, unique)`,
    /// which must already hold their step-S values. Frozen parts are left untouched.
    pub fn reverse(&self, model: &dyn Denoiser, common: &mut [f32], unique: &mut [f32], mask: &PartMask, rng: &mut ChaCha8Rng) -> Result<()> {
        let frames = mask.unique.len();
        let per = unique.len() / frames.max(1);
        let s_max = self.schedule.steps() as f64;
        for (s, prev) in self.schedule.stride_plan(self.stride)? {
            let u = s as f64 / s_max;
            let times: Vec<f64> = mask.as_vec().iter().map(|&free| if free { u } else { 0.0 }).collect();
            let (eps_c, eps_u) = model.predict(common, unique, &times)?;
            let mut step = |z: &mut [f32], eps: &[f32]| -> Result<()> {
                let eta: Vec<f32> = standard_normal::<f32, _>(rng, z.len()).into_iter().map(|v| v * self.noise_scale as f32).collect();
                let next = self.schedule.reverse_jump(z, eps, s, prev, &eta)?;
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SamplingDivergence { step: s });
                }
                z.copy_from_slice(&next);
                Ok(())
            };
            if mask.common {
                step(common, &eps_c)?;
            }
            for (t, &free) in mask.unique.iter().enumerate() {
                if free {
                    step(&mut unique[t * per..(t + 1) * per], &eps_u[t * per..(t + 1) * per])?;
                }
            }
        }
        Ok(())
    }

    /// `√ᾱ_S·z + √(1−ᾱ_S)·ε`, the step-S value of a clean latent.
    fn corrupt_to_start(&self, z: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let eps: Vec<f32> = standard_normal(rng, z.len());
        self.schedule.forward_sample(z, self.schedule.steps(), &eps).expect("S is a valid step")
    }
}

fn latent_sizes(cfg: &RunConfig) -> (usize, usize) {
    let [h, w, d] = cfg.common_shape();
    let [_, hu, wu, _] = cfg.unique_shape();
    (h * w * d, hu * wu * d)
}

/// Undo the training-time latent scaling and package the result.
fn bundle(model: &LdmModel, common: &[f32], unique: &[f32], frames: usize) -> LatentBundle {
    let cfg = model.cfg();
    let [h, w, d] = cfg.common_shape();
    let [_, hu, wu, _] = cfg.unique_shape();
    let c = common.iter().map(|v| v / model.scale.common).collect();
    let u = unique.iter().map(|v| v / model.scale.unique).collect();
    LatentBundle::new(Tensor::from_vec(&[1, h, w, d], c), Tensor::from_vec(&[frames, hu, wu, d], u), cfg.vae_hash())
}

fn scaled(model: &LdmModel, b: &LatentBundle) -> (Vec<f32>, Vec<f32>) {
    (
        b.common.data().iter().map(|v| v * model.scale.common).collect(),
        b.unique.data().iter().map(|v| v * model.scale.unique).collect(),
    )
}

/// A fresh clip latent drawn from noise.
pub fn sample_unconditional(model: &LdmModel, sampler: &Sampler, seed: u64) -> Result<LatentBundle> {
    let (c, u) = sample_scaled(model, sampler, seed)?;
    Ok(bundle(model, &c, &u, model.cfg().frames))
}

fn sample_scaled(model: &dyn Denoiser, sampler: &Sampler, seed: u64) -> Result<(Vec<f32>, Vec<f32>)> {
    let cfg = model.cfg();
    let (nc, nu) = latent_sizes(cfg);
    let mut rng = seeded_rng(seed);
    let mut common = standard_normal(&mut rng, nc);
    let mut unique = standard_normal(&mut rng, nu * cfg.frames);
    sampler.reverse(model, &mut common, &mut unique, &PartMask::all(cfg.frames), &mut rng)?;
    Ok((common, unique))
}

/// Frames generated (and conditioned on) per extension window.
pub fn window(cfg: &RunConfig) -> usize {
    cfg.frames / 2
}

/// Appends `extra` frames to `start`, one window at a time.
pub fn extend_iteratively(model: &LdmModel, sampler: &Sampler, start: &LatentBundle, extra: usize, strategy: Strategy, seed: u64) -> Result<LatentBundle> {
    let cfg = model.cfg();
    start.check_shapes(cfg)?;
    let win = window(cfg);
    if win == 0 || cfg.frames != 2 * win {
        return Err(Error::Config(format!("extension needs an even clip length, got {}", cfg.frames)));
    }
    if extra % win != 0 {
        return Err(Error::Config(format!("{extra} extra frames is not a multiple of the {win}-frame window")));
    }
    if start.frames() < win {
        return Err(Error::Shape(format!("need at least {win} frames to condition on, got {}", start.frames())));
    }
    let (common, unique) = scaled(model, start);
    let (c, u) = extend_scaled(model, sampler, common, unique, extra, strategy, seed, |_, _| {})?;
    Ok(bundle(model, &c, &u, u.len() / latent_sizes(cfg).1))
}

/// Scaled-space extension. `observe` sees the conditional latents (common, unique)
/// after every window, before any boundary reset.
#[allow(clippy::too_many_arguments)]
pub fn extend_scaled(
    model: &dyn Denoiser,
    sampler: &Sampler,
    mut common: Vec<f32>,
    mut frames: Vec<f32>,
    extra: usize,
    strategy: Strategy,
    seed: u64,
    mut observe: impl FnMut(&[f32], &[f32]),
) -> Result<(Vec<f32>, Vec<f32>)> {
    let cfg = model.cfg();
    let (nc, nu) = latent_sizes(cfg);
    let win = window(cfg);
    let mut rng = seeded_rng(seed);
    let common_start = common.clone();
    for _ in 0..extra / win {
        let have = frames.len() / nu;
        let cond_u = frames[(have - win) * nu..].to_vec();
        let mask = PartMask {
            common: strategy.common_evolves(),
            unique: (0..cfg.frames).map(|i| i >= win || strategy.unique_evolves()).collect(),
        };
        let mut c = if mask.common { sampler.corrupt_to_start(&common, &mut rng) } else { common.clone() };
        let mut u = if strategy.unique_evolves() { sampler.corrupt_to_start(&cond_u, &mut rng) } else { cond_u.clone() };
        u.extend(standard_normal::<f32, _>(&mut rng, win * nu));
        sampler.reverse(model, &mut c, &mut u, &mask, &mut rng)?;
        observe(&c, &u[..win * nu]);
        let (next_common, _) = apply_strategy(strategy, (&common_start, &cond_u), (&common, &cond_u), (&c, &u[..win * nu]), true);
        common = next_common;
        frames.extend_from_slice(&u[win * nu..]);
    }
    debug_assert_eq!(common.len(), nc);
    Ok((common, frames))
}

/// Latents held at their clean values during conditional generation.
#[derive(Clone, Debug, Default)]
pub struct ConditionSpec {
    pub fixed_common: Option<Tensor<f32>>,
    /// 1-based frame index and its `[1, hu, wu, D]` (or `[hu, wu, D]`) latent.
    pub fixed_unique: Vec<(usize, Tensor<f32>)>,
}

impl ConditionSpec {
    /// Holds the common latent of `b`, its unique latents, or both.
    pub fn from_bundle(b: &LatentBundle, keep_common: bool, keep_unique: bool) -> Self {
        let per = b.unique.numel() / b.frames();
        let (h, w, d) = (b.unique.dim(1), b.unique.dim(2), b.unique.dim(3));
        Self {
            fixed_common: keep_common.then(|| b.common.clone()),
            fixed_unique: if keep_unique {
                (0..b.frames()).map(|t| (t + 1, Tensor::from_vec(&[1, h, w, d], b.unique.data()[t * per..(t + 1) * per].to_vec()))).collect()
            } else {
                Vec::new()
            },
        }
    }
}

/// Denoises the free parts while the fixed ones stay clean (time 0) throughout.
pub fn conditional_generate(model: &LdmModel, sampler: &Sampler, cond: &ConditionSpec, seed: u64) -> Result<LatentBundle> {
    let cfg = model.cfg();
    let (nc, nu) = latent_sizes(cfg);
    let t = cfg.frames;
    let mut mask = PartMask::all(t);
    let mut rng = seeded_rng(seed);
    let mut common = standard_normal(&mut rng, nc);
    let mut unique = standard_normal(&mut rng, nu * t);
    if let Some(c) = &cond.fixed_common {
        if c.numel() != nc {
            return Err(Error::Shape(format!("fixed common latent has {} values, need {nc}", c.numel())));
        }
        common = c.data().iter().map(|v| v * model.scale.common).collect();
        mask.common = false;
    }
    for (idx, z) in &cond.fixed_unique {
        if !(1..=t).contains(idx) {
            return Err(Error::Range(format!("frame index {idx} outside 1..={t}")));
        }
        if z.numel() != nu {
            return Err(Error::Shape(format!("fixed unique latent has {} values, need {nu}", z.numel())));
        }
        let i = idx - 1;
        unique[i * nu..(i + 1) * nu].iter_mut().zip(z.data()).for_each(|(dst, v)| *dst = v * model.scale.unique);
        mask.unique[i] = false;
    }
    if !mask.as_vec().iter().any(|&f| f) {
        return Err(Error::NoOp("every latent part is fixed".into()));
    }
    sampler.reverse(model, &mut common, &mut unique, &mask, &mut rng)?;
    // fixed parts come back bit-identical, not round-tripped through the scaling
    let mut out = bundle(model, &common, &unique, t);
    if let Some(c) = &cond.fixed_common {
        out.common = c.reshape(out.common.shape()).detach();
    }
    let mut data = out.unique.to_vec();
    for (idx, z) in &cond.fixed_unique {
        data[(idx - 1) * nu..*idx * nu].copy_from_slice(z.data());
    }
    out.unique = Tensor::from_vec(out.unique.shape(), data);
    Ok(out)
}

/// Everything needed to replay a sampling run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingManifest {
    pub seed: u64,
    pub strategy: Strategy,
    pub frames: usize,
    pub steps: usize,
    pub stride: usize,
    pub config_hash: String,
}

impl SamplingManifest {
    pub fn to_text(&self) -> String {
        format!(
            "seed = {}\nstrategy = {}\nframes = {}\nsteps = {}\nstride = {}\nconfig_hash = {}\n",
            self.seed, self.strategy, self.frames, self.steps, self.stride, self.config_hash
        )
    }
}

/// Initial clip followed by extension to `frames` in total.
pub fn sample_video(model: &LdmModel, sampler: &Sampler, frames: usize, strategy: Strategy, seed: u64) -> Result<(LatentBundle, SamplingManifest)> {
    let cfg = model.cfg();
    if frames < cfg.frames {
        return Err(Error::Config(format!("cannot sample {frames} frames, the model's clip length is {}", cfg.frames)));
    }
    let first = sample_unconditional(model, sampler, seed)?;
    let out = if frames == cfg.frames {
        first
    } else {
        extend_iteratively(model, sampler, &first, frames - cfg.frames, strategy, seed.wrapping_add(1))?
    };
    let manifest = SamplingManifest {
        seed,
        strategy,
        frames,
        steps: sampler.schedule.steps(),
        stride: sampler.stride,
        config_hash: cfg.hash(),
    };
    Ok((out, manifest))
}

#[cfg(test)]
mod tests;
