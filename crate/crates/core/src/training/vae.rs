use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clip::VideoClip;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{seeded_rng, Binding};
use crate::tensor::Tensor;
use crate::vae::disc::DiscModel;
use crate::vae::loss::{disc_loss, gen_adv_loss, kl_loss, perceptual_loss, rec_loss, VaeLossReport, VaeLossTerms};
use crate::vae::{pick_frames, VaeModel};

use super::LossHistory;

/// Generator/discriminator state for autoencoder training.
#[derive(Clone, Debug)]
pub struct VaeTrainer {
    pub model: VaeModel,
    pub disc: DiscModel,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub history: LossHistory<VaeLossReport>,
}

impl VaeTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = VaeModel::init(cfg, cfg.seed)?;
        let disc = DiscModel::init(Self::disc_frames(cfg), cfg.disc_hidden, cfg.seed.wrapping_add(1));
        let opt_g = Adam::new(&model.params, cfg.vae_lr);
        let opt_d = Adam::new(&disc.params, cfg.vae_lr);
        Ok(Self {
            model,
            disc,
            opt_g,
            opt_d,
            rng: seeded_rng(cfg.seed.wrapping_add(2)),
            iteration: 0,
            history: LossHistory::new(1024),
        })
    }

    /// Frames decoded per clip in a training step (and stacked for the discriminator).
    pub fn disc_frames(cfg: &RunConfig) -> usize {
        if cfg.vae_train_frames == 0 {
            cfg.frames
        } else {
            cfg.vae_train_frames
        }
    }

    pub fn cfg(&self) -> &RunConfig {
        self.model.cfg()
    }

    fn adversarial(&self) -> bool {
        self.cfg().adv_weight > 0.0 && self.iteration >= self.cfg().adv_warmup_iters
    }

    /// One generator update, then one discriminator update once warm-up has passed.
    pub fn step(&mut self, dataset: &[VideoClip]) -> Result<VaeLossReport> {
        if dataset.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = self.cfg().clone();
        let batch: Vec<&VideoClip> = (0..cfg.vae_batch).map(|_| &dataset[self.rng.gen_range(0..dataset.len())]).collect();
        let adversarial = self.adversarial();

        let gen = Binding::trainable(&self.model.params);
        let disc_frozen = Binding::frozen(&self.disc.params);
        let mut totals = Vec::with_capacity(batch.len());
        let mut reports = Vec::with_capacity(batch.len());
        let mut fakes = Vec::with_capacity(batch.len());
        for clip in &batch {
            clip.validate(cfg.f_u)?;
            let x = clip.to_tensor();
            let enc = self.model.arch.encode(&gen, &x, Some(&mut self.rng))?;
            let idx = pick_frames(&mut self.rng, cfg.frames, cfg.vae_train_frames);
            let x_sel = x.index_select(0, &idx);
            let x_hat = self.model.arch.decode(&gen, &enc.common.sample, &enc.unique.sample.index_select(0, &idx))?;
            let adv = adversarial.then(|| gen_adv_loss(&self.disc.arch.forward(&disc_frozen, &x_hat)));
            let terms = VaeLossTerms {
                rec: rec_loss(&x_sel, &x_hat),
                kl: kl_loss(&enc.common).add(&kl_loss(&enc.unique)),
                adv,
                perceptual: perceptual_loss(&x_sel, &x_hat),
            };
            let (total, report) = terms.combine(&cfg, self.iteration)?;
            totals.push(total);
            reports.push(report);
            fakes.push((x_sel, x_hat.detach()));
        }
        let scale = 1.0 / batch.len() as f64;
        let loss = totals.iter().skip(1).fold(totals[0].clone(), |a, b| a.add(b)).scale(scale);
        let mut grads = loss.backward();
        let g = gen.collect_grads(&mut grads);
        drop(gen);
        self.opt_g.lr = cfg.lr_at(cfg.vae_lr, self.iteration, cfg.vae_iters);
        self.opt_d.lr = self.opt_g.lr;
        self.opt_g.update(&mut self.model.params, &g);

        if adversarial {
            let d = Binding::trainable(&self.disc.params);
            let losses: Vec<Tensor<f32>> = fakes
                .iter()
                .map(|(real, fake)| disc_loss(&self.disc.arch.forward(&d, real), &self.disc.arch.forward(&d, fake)))
                .collect();
            let loss = losses.iter().skip(1).fold(losses[0].clone(), |a, b| a.add(b)).scale(scale);
            if loss.has_non_finite() {
                return Err(Error::TrainingDivergence {
                    iteration: self.iteration,
                    report: format!("discriminator loss {}", loss.item()),
                });
            }
            let mut grads = loss.backward();
            let g = d.collect_grads(&mut grads);
            drop(d);
            self.opt_d.update(&mut self.disc.params, &g);
        }

        let mean = |f: fn(&VaeLossReport) -> f64| reports.iter().map(f).sum::<f64>() * scale;
        let report = VaeLossReport {
            rec: mean(|r| r.rec),
            kl: mean(|r| r.kl),
            adv: mean(|r| r.adv),
            perceptual: mean(|r| r.perceptual),
            total: mean(|r| r.total),
        };
        self.history.push(self.iteration, report);
        self.iteration += 1;
        Ok(report)
    }
}
