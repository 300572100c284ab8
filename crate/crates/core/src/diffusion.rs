//! Discrete DDPM schedule with continuous-time interpolation, forward corruption and
//! ancestral reverse steps.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Precomputed tables, 1-indexed by step through the accessors (`alpha_bar(0) == 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for (i, a) in alphas.iter().enumerate() {
            let next = acc * a;
            // long schedules with large betas drive the product to zero in floating point
            if !(next > 0.0 && next < acc) {
                return Err(Error::Config(format!("cumulative alpha stops decreasing at step {}", i + 1)));
            }
            acc = next;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, posterior_vars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alphas[s - 1]
    }

    /// ᾱ_s with ᾱ_0 = 1.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    pub fn posterior_var(&self, s: usize) -> f64 {
        self.posterior_vars[s - 1]
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s < 1 || s > self.steps() {
            return Err(Error::Domain(format!("step {s} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// Continuous ᾱ(u) for u ∈ (0, 1]: log-linear between the integer steps around u·S.
    pub fn alpha_bar_continuous(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u <= 1.0) {
            return Err(Error::Domain(format!("time {u} outside (0, 1]")));
        }
        Ok(self.alpha_bar_at(u * self.steps() as f64))
    }

    /// ᾱ at a real-valued step position in [0, S].
    fn alpha_bar_at(&self, pos: f64) -> f64 {
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 || lo >= self.steps() {
            return self.alpha_bar(lo.min(self.steps()));
        }
        let (a, b) = (self.alpha_bar(lo).ln(), self.alpha_bar(lo + 1).ln());
        (a + frac * (b - a)).exp()
    }

    /// `z_s = √ᾱ_s·z_0 + √(1−ᾱ_s)·ε` at integer step s.
    pub fn forward_sample<T: Scalar>(&self, z0: &[T], s: usize, eps: &[T]) -> Result<Vec<T>> {
        self.check_step(s)?;
        corrupt(z0, eps, self.alpha_bar(s))
    }

    /// Same as [`forward_sample`](Self::forward_sample) at continuous time u.
    pub fn forward_sample_u<T: Scalar>(&self, z0: &[T], u: f64, eps: &[T]) -> Result<Vec<T>> {
        corrupt(z0, eps, self.alpha_bar_continuous(u)?)
    }

    /// One ancestral step s → s−1: `μ + √β̃_s·η`.
    pub fn reverse_step<T: Scalar>(&self, z: &[T], eps_hat: &[T], s: usize, eta: &[T]) -> Result<Vec<T>> {
        self.check_step(s)?;
        self.reverse_jump(z, eps_hat, s, s - 1, eta)
    }

    /// Ancestral jump s → `prev` (< s) using the effective β of the composed kernel.
    /// Reduces to [`reverse_step`](Self::reverse_step) when `prev == s − 1`.
    pub fn reverse_jump<T: Scalar>(&self, z: &[T], eps_hat: &[T], s: usize, prev: usize, eta: &[T]) -> Result<Vec<T>> {
        self.check_step(s)?;
        if prev >= s {
            return Err(Error::Domain(format!("jump target {prev} not below {s}")));
        }
        if z.len() != eps_hat.len() || z.len() != eta.len() {
            return Err(Error::Shape(format!(
                "reverse step lengths differ: z {}, eps {}, eta {}",
                z.len(),
                eps_hat.len(),
                eta.len()
            )));
        }
        let (ab, ab_prev) = (self.alpha_bar(s), self.alpha_bar(prev));
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let var = if prev == 0 { 0.0 } else { (1.0 - ab_prev) / (1.0 - ab) * beta };
        let c_eps = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = var.sqrt();
        Ok(z.iter()
            .zip(eps_hat)
            .zip(eta)
            .map(|((&z, &e), &n)| {
                let (z, e, n) = (z.to_f64().unwrap(), e.to_f64().unwrap(), n.to_f64().unwrap());
                T::of((z - c_eps * e) * inv_sqrt_alpha + sigma * n)
            })
            .collect())
    }

    /// Posterior mean of q(z_{s−1} | z_s, z_0).
    pub fn posterior_mean(&self, z_s: f64, z0: f64, s: usize) -> Result<f64> {
        self.check_step(s)?;
        let (ab, ab_prev) = (self.alpha_bar(s), self.alpha_bar(s - 1));
        let c0 = ab_prev.sqrt() * self.beta(s) / (1.0 - ab);
        let cs = self.alpha(s).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok(c0 * z0 + cs * z_s)
    }

    /// Descending visit order for sampling every `stride`-th step, always starting at S.
    /// Each entry is `(s, prev)`; the last jump lands on 0.
    pub fn stride_plan(&self, stride: usize) -> Result<Vec<(usize, usize)>> {
        if stride < 1 {
            return Err(Error::Domain("stride must be at least 1".into()));
        }
        let mut visits: Vec<usize> = (1..=self.steps()).rev().step_by(stride).collect();
        visits.push(0);
        Ok(visits.windows(2).map(|w| (w[0], w[1])).collect())
    }

    /// CSV with header `s,beta,alpha,alpha_bar,posterior_var`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,beta,alpha,alpha_bar,posterior_var\n");
        for s in 1..=self.steps() {
            let _ = writeln!(
                out,
                "{s},{},{},{},{}",
                self.beta(s),
                self.alpha(s),
                self.alpha_bar(s),
                self.posterior_var(s)
            );
        }
        out
    }
}

fn corrupt<T: Scalar>(z0: &[T], eps: &[T], ab: f64) -> Result<Vec<T>> {
    if z0.len() != eps.len() {
        return Err(Error::Shape(format!("noise length {} does not match latent length {}", eps.len(), z0.len())));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(&z, &e)| T::of(a * z.to_f64().unwrap() + b * e.to_f64().unwrap()))
        .collect())
}

/// Uniform draw from (0, 1].
pub fn sample_time<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

pub fn standard_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// A corrupted latent with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair<T> {
    pub z: Vec<T>,
    pub eps: Vec<T>,
    pub u: f64,
}

/// Draws u and ε and corrupts `z0` at u.
pub fn training_pair<T: Scalar, R: Rng>(schedule: &NoiseSchedule, z0: &[T], rng: &mut R) -> TrainingPair<T> {
    let u = sample_time(rng);
    training_pair_at(schedule, z0, u, rng)
}

/// Like [`training_pair`] with a caller-chosen time, so several latents can share one draw.
pub fn training_pair_at<T: Scalar, R: Rng>(schedule: &NoiseSchedule, z0: &[T], u: f64, rng: &mut R) -> TrainingPair<T> {
    let eps = standard_normal(rng, z0.len());
    let z = schedule.forward_sample_u(z0, u, &eps).expect("time drawn inside (0, 1]");
    TrainingPair { z, eps, u }
}
