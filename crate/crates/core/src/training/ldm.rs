use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::diffusion::{sample_time, training_pair_at, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ldm::{shared_times, LatentScale, LdmModel, NoisePrediction};
use crate::nn::optim::{Adam, Ema};
use crate::nn::{seeded_rng, Binding};
use crate::tensor::{Scalar, Tensor};
use crate::vae::LatentBundle;

use super::LossHistory;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LdmLossReport {
    pub common: f64,
    pub unique: f64,
    pub total: f64,
}

impl std::fmt::Display for LdmLossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "diffusion_common={} diffusion_unique={} total={}", self.common, self.unique, self.total)
    }
}

/// `MSE(ε_c, ε̂_c) + MSE(ε_u, ε̂_u)`, unweighted. Returns the total and both terms.
pub fn diffusion_loss<T: Scalar>(pred: &NoisePrediction<T>, eps_common: &Tensor<T>, eps_unique: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = pred.common.mse(eps_common);
    let u = pred.unique.mse(eps_unique);
    (c.add(&u), c, u)
}

/// Denoiser optimisation over a fixed set of encoded clips.
#[derive(Clone, Debug)]
pub struct LdmTrainer {
    pub model: LdmModel,
    pub ema: Ema,
    pub opt: Adam,
    pub schedule: NoiseSchedule,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub history: LossHistory<LdmLossReport>,
    pub vae_hash: String,
}

impl LdmTrainer {
    /// Fits the latent scaling on `latents`, which must all come from the autoencoder
    /// whose architecture `cfg` describes.
    pub fn new(cfg: &RunConfig, latents: &[LatentBundle]) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::Config("latent training set is empty".into()));
        }
        let vae_hash = cfg.vae_hash();
        for b in latents {
            if b.config_hash != vae_hash {
                return Err(Error::Compatibility(format!("latents come from autoencoder {}, config expects {vae_hash}", b.config_hash)));
            }
            b.check_shapes(cfg)?;
            if b.frames() != cfg.frames {
                return Err(Error::Shape(format!("latent bundle has {} frames, config has {}", b.frames(), cfg.frames)));
            }
        }
        let mut model = LdmModel::init(cfg, cfg.seed)?;
        model.scale = LatentScale::fit(latents.iter().map(|b| (b.common.data(), b.unique.data())));
        let ema = Ema::new(&model.params, cfg.ema_decay);
        let opt = Adam::new(&model.params, cfg.ldm_lr);
        let schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(Self {
            model,
            ema,
            opt,
            schedule,
            rng: seeded_rng(cfg.seed.wrapping_add(3)),
            iteration: 0,
            history: LossHistory::new(1024),
            vae_hash,
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        self.model.cfg()
    }

    /// One optimiser step on a random batch. Both latent kinds of a clip share one time draw.
    pub fn step(&mut self, latents: &[LatentBundle]) -> Result<LdmLossReport> {
        if latents.is_empty() {
            return Err(Error::Config("latent training set is empty".into()));
        }
        let cfg = self.cfg().clone();
        let scale = self.model.scale;
        let (mut zc, mut zu, mut ec, mut eu, mut us) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.ldm_batch {
            let b = &latents[self.rng.gen_range(0..latents.len())];
            let u = sample_time(&mut self.rng);
            let c0: Vec<f32> = b.common.data().iter().map(|v| v * scale.common).collect();
            let u0: Vec<f32> = b.unique.data().iter().map(|v| v * scale.unique).collect();
            let pc = training_pair_at(&self.schedule, &c0, u, &mut self.rng);
            let pu = training_pair_at(&self.schedule, &u0, u, &mut self.rng);
            zc.extend(pc.z);
            ec.extend(pc.eps);
            zu.extend(pu.z);
            eu.extend(pu.eps);
            us.push(u);
        }
        let n = cfg.ldm_batch;
        let [h, w, d] = cfg.common_shape();
        let [t, hu, wu, _] = cfg.unique_shape();
        let cshape = [n, h, w, d];
        let ushape = [n * t, hu, wu, d];

        let p = Binding::trainable(&self.model.params);
        let pred = self.model.arch.predict_noise(&p, &Tensor::from_vec(&cshape, zc), &Tensor::from_vec(&ushape, zu), &shared_times(&us, t))?;
        let (total, lc, lu) = diffusion_loss(&pred, &Tensor::from_vec(&cshape, ec), &Tensor::from_vec(&ushape, eu));
        let report = LdmLossReport { common: lc.item() as f64, unique: lu.item() as f64, total: total.item() as f64 };
        if !report.total.is_finite() {
            return Err(Error::TrainingDivergence { iteration: self.iteration, report: report.to_string() });
        }
        let mut grads = total.backward();
        let g = p.collect_grads(&mut grads);
        drop(p);
        self.opt.lr = cfg.lr_at(cfg.ldm_lr, self.iteration, cfg.ldm_iters);
        self.opt.update(&mut self.model.params, &g);
        self.iteration += 1;
        if self.iteration % cfg.ema_interval == 0 {
            self.ema.update(&self.model.params);
        }
        self.history.push(self.iteration - 1, report);
        Ok(report)
    }
}
