//! Reconstruction, KL, gradient-magnitude perceptual proxy and adversarial terms.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::GaussianLatent;

/// Scales of the Sobel pyramid.
pub const PERCEPTUAL_SCALES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaeLossReport {
    pub rec: f64,
    pub kl: f64,
    pub adv: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl VaeLossReport {
    pub fn has_non_finite(&self) -> bool {
        ![self.rec, self.kl, self.adv, self.perceptual, self.total].iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for VaeLossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rec={} kl={} adv={} perceptual={} total={}",
            self.rec, self.kl, self.adv, self.perceptual, self.total
        )
    }
}

/// Mean squared error over every pixel of every frame.
pub fn rec_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Tensor<T> {
    x.mse(x_hat)
}

/// `Σ ½(μ² + σ² − 1 − log σ²)` over every element.
pub fn kl_loss<T: Scalar>(latent: &GaussianLatent<T>) -> Tensor<T> {
    kl_from_moments(&latent.mean, &latent.logvar)
}

pub fn kl_from_moments<T: Scalar>(mean: &Tensor<T>, logvar: &Tensor<T>) -> Tensor<T> {
    mean.square().add(&logvar.exp()).sub(logvar).add_scalar(-1.0).sum_all().scale(0.5)
}

fn sobel_weight<T: Scalar>() -> Tensor<T> {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    // [kh, kw, 3, 6]: outputs 0..3 horizontal gradients, 3..6 vertical
    let mut w = vec![T::zero(); 3 * 3 * 3 * 6];
    for ky in 0..3 {
        for kxi in 0..3 {
            for c in 0..3 {
                let base = ((ky * 3 + kxi) * 3 + c) * 6;
                w[base + c] = T::of(kx[ky][kxi]);
                w[base + 3 + c] = T::of(kx[kxi][ky]);
            }
        }
    }
    Tensor::from_vec(&[3, 3, 3, 6], w)
}

/// Per-pixel, per-channel Sobel gradient magnitude of `[N, H, W, 3]` frames.
pub fn gradient_magnitude<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let g = x.conv2d(&sobel_weight(), 1, 1);
    let gx = g.narrow(3, 0, 3);
    let gy = g.narrow(3, 3, 3);
    gx.square().add(&gy.square()).add_scalar(1e-6).sqrt()
}

/// L1 distance of Sobel magnitudes, averaged over three dyadic scales.
pub fn perceptual_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Tensor<T> {
    let mut total: Option<Tensor<T>> = None;
    for s in 0..PERCEPTUAL_SCALES {
        let f = 1 << s;
        if x.dim(1) % f != 0 || x.dim(2) % f != 0 {
            break;
        }
        let d = gradient_magnitude(&x.avg_pool(f)).sub(&gradient_magnitude(&x_hat.avg_pool(f))).abs().mean_all();
        total = Some(match total {
            None => d,
            Some(t) => t.add(&d),
        });
    }
    total.expect("at least one scale").scale(1.0 / PERCEPTUAL_SCALES as f64)
}

/// Discriminator objective: `softplus(−D(x)) + softplus(D(x̂))`, averaged over patches.
pub fn disc_loss<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> Tensor<T> {
    real_logits.neg().softplus().mean_all().add(&fake_logits.softplus().mean_all())
}

/// Non-saturating generator objective `softplus(−D(x̂))`.
pub fn gen_adv_loss<T: Scalar>(fake_logits: &Tensor<T>) -> Tensor<T> {
    fake_logits.neg().softplus().mean_all()
}

/// Autoencoder terms for one batch.
pub struct VaeLossTerms<T: Scalar> {
    pub rec: Tensor<T>,
    pub kl: Tensor<T>,
    pub adv: Option<Tensor<T>>,
    pub perceptual: Tensor<T>,
}

impl<T: Scalar> VaeLossTerms<T> {
    /// Weighted total plus the scalar report. The adversarial term counts only from
    /// `adv_warmup_iters` on.
    pub fn combine(&self, cfg: &RunConfig, iteration: u64) -> Result<(Tensor<T>, VaeLossReport)> {
        let mut total = self.rec.add(&self.kl.scale(cfg.kl_weight)).add(&self.perceptual.scale(cfg.perceptual_weight));
        let adv_active = iteration >= cfg.adv_warmup_iters;
        if let (true, Some(adv)) = (adv_active, &self.adv) {
            total = total.add(&adv.scale(cfg.adv_weight));
        }
        let val = |t: &Tensor<T>| t.item().to_f64().unwrap();
        let report = VaeLossReport {
            rec: val(&self.rec),
            kl: val(&self.kl),
            adv: self.adv.as_ref().map(val).unwrap_or(0.0),
            perceptual: val(&self.perceptual),
            total: val(&total),
        };
        if report.has_non_finite() {
            return Err(Error::TrainingDivergence { iteration, report: report.to_string() });
        }
        Ok((total, report))
    }
}
