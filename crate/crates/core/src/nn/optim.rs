//! Adaptive-moment optimiser, global-norm clipping and EMA shadow weights.

use crate::nn::params::ParamStore;

/// Adam with bias correction. Moments are kept in 32-bit like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Returns the pre-clipping global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>]) -> f64 {
        assert_eq!(grads.len(), store.len(), "gradient list does not match the store");
        let norm = global_norm(grads);
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps, clip) = (b1 as f32, b2 as f32, self.eps as f32, clip as f32);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in entry.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

pub fn global_norm(grads: &[Option<Vec<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: ParamStore<f32>,
}

impl Ema {
    pub fn new(store: &ParamStore<f32>, decay: f64) -> Self {
        Self { decay, shadow: store.clone() }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, store: &ParamStore<f32>) {
        let d = self.decay as f32;
        for (s, p) in self.shadow.entries_mut().iter_mut().zip(store.entries()) {
            assert_eq!(s.shape, p.shape, "EMA shadow out of sync at {}", p.name);
            for (a, &b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", &[vals.len()], vals.to_vec());
        s
    }

    #[test]
    fn ema_update_matches_definition() {
        let params = store(&[1.0, -2.0, 4.0]);
        let mut ema = Ema::new(&store(&[0.0, 0.0, 1.0]), 0.9);
        ema.update(&params);
        let got = &ema.shadow.entries()[0].data;
        let want = [0.9 * 0.0 + 0.1 * 1.0, 0.9 * 0.0 + 0.1 * -2.0, 0.9 * 1.0 + 0.1 * 4.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w as f32).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store(&[0.5, 0.5]);
        let mut opt = Adam::new(&s, 0.01);
        opt.clip_norm = None;
        opt.update(&mut s, &[Some(vec![3.0, -0.2])]);
        let d = &s.entries()[0].data;
        assert!((d[0] - 0.49).abs() < 1e-5);
        assert!((d[1] - 0.51).abs() < 1e-5);
    }

    #[test]
    fn clipping_scales_to_unit_norm() {
        let mut s = store(&[0.0]);
        let mut opt = Adam::new(&s, 0.1);
        let n = opt.update(&mut s, &[Some(vec![10.0])]);
        assert!((n - 10.0).abs() < 1e-9);
        // Adam is scale invariant on the first step, so only the reported norm changes
        assert!((s.entries()[0].data[0] + 0.1).abs() < 1e-5);
    }

    #[test]
    fn untouched_parameters_stay_put() {
        let mut s = store(&[1.0]);
        s.add("frozen", &[1], vec![7.0]);
        let mut opt = Adam::new(&s, 0.1);
        opt.update(&mut s, &[Some(vec![1.0]), None]);
        assert_eq!(s.entries()[1].data[0], 7.0);
    }
}
