//! Central finite differences against reverse-mode gradients.
//!
//! The scalar probe is `Σ f(x) ⊙ R` for a fixed random `R`, so every output
//! element contributes. Errors are reported per tensor as
//! `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.

use rand_distr::{Distribution, StandardNormal};

use crate::nn::params::{Binding, ParamStore};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TensorError {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorError> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Options for [`check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: 64, seed: 17 }
    }
}

/// Checks gradients of `f` with respect to every parameter in `store` and every input.
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> GradCheckReport
where
    F: Fn(&Binding<'_, f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    // analytic
    let binding = Binding::trainable(store);
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| Tensor::param(t.shape(), t.to_vec())).collect();
    let out = f(&binding, &leaves);
    let mut rng = seeded_rng(opts.seed);
    let proj: Vec<f64> = (0..out.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let proj = Tensor::from_vec(out.shape(), proj);
    let mut grads = out.mul(&proj).sum_all().backward();
    let param_grads = binding.collect_grads(&mut grads);
    let input_grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| grads.take(l).unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let probe = |s: &ParamStore<f64>, xs: &[Tensor<f64>]| -> f64 {
        let b = Binding::frozen(s);
        f(&b, xs).mul(&proj).sum_all().item()
    };

    let mut entries = Vec::new();
    let mut scratch = store.clone();
    for (pi, entry) in store.entries().iter().enumerate() {
        let analytic = param_grads[pi].clone().unwrap_or_else(|| vec![0.0; entry.data.len()]);
        let coords = strided(entry.data.len(), opts.max_coords);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = entry.data[c];
            scratch.entries_mut()[pi].data[c] = orig + opts.eps;
            let up = probe(&scratch, inputs);
            scratch.entries_mut()[pi].data[c] = orig - opts.eps;
            let down = probe(&scratch, inputs);
            scratch.entries_mut()[pi].data[c] = orig;
            numeric.push((up - down) / (2.0 * opts.eps));
        }
        let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        entries.push(compare(&entry.name, &picked, &numeric));
    }
    for (ii, x) in inputs.iter().enumerate() {
        let coords = strided(x.numel(), opts.max_coords);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
            let mut data = x.to_vec();
            data[c] += opts.eps;
            perturbed[ii] = Tensor::from_vec(x.shape(), data.clone());
            let up = probe(store, &perturbed);
            data[c] -= 2.0 * opts.eps;
            perturbed[ii] = Tensor::from_vec(x.shape(), data);
            let down = probe(store, &perturbed);
            numeric.push((up - down) / (2.0 * opts.eps));
        }
        let picked: Vec<f64> = coords.iter().map(|&c| input_grads[ii][c]).collect();
        entries.push(compare(&format!("input[{ii}]"), &picked, &numeric));
    }
    GradCheckReport { entries }
}

fn strided(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let step = n as f64 / max as f64;
        (0..max).map(|i| ((i as f64 * step) as usize).min(n - 1)).collect()
    }
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorError {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    // gradients this small are finite-difference noise; compare them absolutely
    let rel_error = if denom < 1e-7 { diff } else { diff / denom };
    TensorError { name: name.to_string(), rel_error, analytic_norm: na, checked: analytic.len() }
}
