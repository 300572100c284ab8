//! PSNR, SSIM and a self-contained Fréchet distance over handcrafted clip statistics.
//! Everything is computed in 64-bit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::clip::VideoClip;
use crate::error::{Error, Result};

/// Reported PSNR for (near-)identical inputs.
pub const PSNR_CAP: f64 = 99.0;
/// Identifies the proxy feature layout in reports.
pub const PROXY_FEATURES: &str = "proxy-fvd-v2";
const RIDGE: f64 = 1e-6;

fn check_same(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("inputs have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` for values in [0, 1], capped at 99 dB when MSE < 1e-10.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    check_same(a, b)?;
    if a.is_empty() {
        return Err(Error::Shape("empty frames".into()));
    }
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Separable Gaussian blur of one `h × w` plane.
fn blur(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xi in 0..w {
            tmp[y * w + xi] = k.iter().enumerate().map(|(j, &kv)| kv * x[y * w + reflect(xi as isize + j as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xi in 0..w {
            out[y * w + xi] = k.iter().enumerate().map(|(j, &kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + xi]).sum();
        }
    }
    out
}

/// SSIM of two `h × w × c` frames (11×11 Gaussian window, σ = 1.5, unit data range),
/// averaged over channels. Borders within the window radius are excluded.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, c: usize) -> Result<f64> {
    check_same(a, b)?;
    if a.len() != h * w * c || c == 0 {
        return Err(Error::Shape(format!("{} values do not form a {h}×{w}×{c} frame", a.len())));
    }
    if h <= 2 * SSIM_RADIUS || w <= 2 * SSIM_RADIUS {
        return Err(Error::Shape(format!("{h}×{w} frame is smaller than the {}-pixel window", 2 * SSIM_RADIUS + 1)));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..h * w).map(|i| a[i * c + ch] as f64).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b[i * c + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, my) = (blur(&x, h, w, &k), blur(&y, h, w, &k));
        let (xx, yy, xy) = (blur(&prod(&x, &x), h, w, &k), blur(&prod(&y, &y), h, w, &k), blur(&prod(&x, &y), h, w, &k));
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in SSIM_RADIUS..h - SSIM_RADIUS {
            for q in SSIM_RADIUS..w - SSIM_RADIUS {
                let i = r * w + q;
                let (ux, uy) = (mx[i], my[i]);
                let (vx, vy, cxy) = (xx[i] - ux * ux, yy[i] - uy * uy, xy[i] - ux * uy);
                sum += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}

/// Frame-averaged PSNR and SSIM between two clips of equal shape.
pub fn clip_scores(a: &VideoClip, b: &VideoClip) -> Result<(f64, f64)> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("clips {:?} and {:?} differ in shape", a.dims, b.dims)));
    }
    let (t, h, w, c) = (a.frames(), a.height(), a.width(), a.channels());
    let mut ps = 0.0;
    let mut ss = 0.0;
    for i in 0..t {
        ps += psnr(a.frame(i), b.frame(i))?;
        ss += ssim(a.frame(i), b.frame(i), h, w, c)?;
    }
    Ok((ps / t as f64, ss / t as f64))
}

/// Handcrafted clip descriptor: per-frame channel means and deviations, mean absolute
/// frame-to-frame change per channel, and channel energy on a 1×1 and 2×2 spatial pyramid.
pub fn clip_features(clip: &VideoClip) -> Vec<f64> {
    let (t, h, w, c) = (clip.frames(), clip.height(), clip.width(), clip.channels());
    let mut f = Vec::with_capacity(2 * t * c + c + 5 * c);
    for i in 0..t {
        let frame = clip.frame(i);
        for ch in 0..c {
            let vals = frame.iter().skip(ch).step_by(c).map(|&v| v as f64);
            let n = (h * w) as f64;
            let (s, sq) = vals.fold((0.0, 0.0), |(s, sq), v| (s + v, sq + v * v));
            let mean = s / n;
            f.push(mean);
            f.push((sq / n - mean * mean).max(0.0).sqrt());
        }
    }
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 1..t {
            let (p, q) = (clip.frame(i - 1), clip.frame(i));
            acc += (0..h * w).map(|j| (q[j * c + ch] as f64 - p[j * c + ch] as f64).abs()).sum::<f64>();
        }
        f.push(if t > 1 { acc / ((t - 1) * h * w) as f64 } else { 0.0 });
    }
    for cells in [1usize, 2] {
        let (ch_h, ch_w) = (h / cells, w / cells);
        for gy in 0..cells {
            for gx in 0..cells {
                for ch in 0..c {
                    let mut e = 0.0;
                    for i in 0..t {
                        let frame = clip.frame(i);
                        for y in gy * ch_h..(gy + 1) * ch_h {
                            for x in gx * ch_w..(gx + 1) * ch_w {
                                e += (frame[(y * w + x) * c + ch] as f64).powi(2);
                            }
                        }
                    }
                    f.push(e / (t * ch_h * ch_w) as f64);
                }
            }
        }
    }
    f
}

/// Mean and ridge-regularised sample covariance of row vectors.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Shape(format!("need at least 2 clips per set, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..d {
        cov[(i, i)] += RIDGE;
    }
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{½}Σ₂Σ₁^{½})^{½})`.
pub fn frechet_distance(a: &(DVector<f64>, DMatrix<f64>), b: &(DVector<f64>, DMatrix<f64>)) -> f64 {
    let diff = (&a.0 - &b.0).norm_squared();
    let s1 = sqrt_psd(&a.1);
    let inner = &s1 * &b.1 * &s1;
    let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (diff + a.1.trace() + b.1.trace() - 2.0 * cross).max(0.0)
}

/// Rescales every feature by its pooled within-set standard deviation,
/// `sqrt((var_a + var_b) / 2)`, so that small-valued groups such as frame differences are
/// not drowned out by colour. The spread between the two sets is left out on purpose: it
/// would grow with the very gap being measured and cap every feature's contribution.
/// Features constant within both sets are left as they are.
fn standardize(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) {
    let var = |set: &[Vec<f64>], j: usize| {
        let n = set.len() as f64;
        let mean = set.iter().map(|f| f[j]).sum::<f64>() / n;
        set.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n
    };
    for j in 0..a[0].len() {
        let sd = ((var(a, j) + var(b, j)) / 2.0).sqrt();
        if sd > 1e-12 {
            for f in a.iter_mut().chain(b.iter_mut()) {
                f[j] /= sd;
            }
        }
    }
}

/// Fréchet distance between Gaussian fits of the standardised clip features of two sets.
pub fn proxy_fvd(real: &[VideoClip], generated: &[VideoClip]) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Shape(format!("need at least 2 clips per set, got {} and {}", real.len(), generated.len())));
    }
    let mut fa: Vec<Vec<f64>> = real.iter().map(clip_features).collect();
    let mut fb: Vec<Vec<f64>> = generated.iter().map(clip_features).collect();
    if fa.iter().chain(&fb).any(|f| f.len() != fa[0].len()) {
        return Err(Error::Shape("clip sets have different feature layouts".into()));
    }
    standardize(&mut fa, &mut fb);
    Ok(frechet_distance(&gaussian_fit(&fa)?, &gaussian_fit(&fb)?))
}

/// One evaluated clip pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub clips: Vec<ClipScore>,
    pub proxy_fvd: Option<f64>,
    pub config_hash: String,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        self.clips.iter().map(|c| c.psnr).sum::<f64>() / self.clips.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.clips.iter().map(|c| c.ssim).sum::<f64>() / self.clips.len().max(1) as f64
    }

    /// One row per clip, then a `summary` row carrying means, proxy-FVD and provenance.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,psnr,ssim,proxy_fvd,clips,features,config_hash\n");
        for c in &self.clips {
            s.push_str(&format!("{},{:.6},{:.6},,,,\n", c.name, c.psnr, c.ssim));
        }
        let fvd = self.proxy_fvd.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "summary,{:.6},{:.6},{fvd},{},{PROXY_FEATURES},{}\n",
            self.mean_psnr(),
            self.mean_ssim(),
            self.clips.len(),
            self.config_hash
        ));
        s
    }
}

/// Scores reconstructions against originals and adds proxy-FVD between the two sets.
pub fn evaluate(names: &[String], originals: &[VideoClip], reconstructions: &[VideoClip], config_hash: &str) -> Result<MetricReport> {
    if originals.len() != reconstructions.len() || names.len() != originals.len() {
        return Err(Error::Shape("names, originals and reconstructions differ in count".into()));
    }
    let clips = names
        .par_iter()
        .zip(originals.par_iter().zip(reconstructions))
        .map(|(n, (a, b))| clip_scores(a, b).map(|(psnr, ssim)| ClipScore { name: n.clone(), psnr, ssim }))
        .collect::<Result<Vec<_>>>()?;
    let proxy = if originals.len() >= 2 { Some(proxy_fvd(originals, reconstructions)?) } else { None };
    Ok(MetricReport { clips, proxy_fvd: proxy, config_hash: config_hash.into() })
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::Rng;

    use super::*;
    use crate::nn::seeded_rng;
    use crate::synthetic::{generate_dataset, SceneDistribution};

    fn checkerboard(inverse: bool) -> Vec<f32> {
        let mut v = Vec::with_capacity(64 * 64 * 3);
        for y in 0..64 {
            for x in 0..64 {
                let on = ((y / 8 + x / 8) % 2 == 1) != inverse;
                v.extend([if on { 1.0 } else { 0.0 }; 3]);
            }
        }
        v
    }

    #[test]
    fn psnr_cases() {
        let a = vec![0.5f32; 48];
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = vec![0.6f32; 48];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(psnr(&a, &b[..47]), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_matches_reference_values() {
        let a = checkerboard(false);
        let b = checkerboard(true);
        // scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1)
        assert!((ssim(&a, &b, 64, 64, 3).unwrap() - -0.5794482349347629).abs() < 1e-4);
        assert!((ssim(&a, &a, 64, 64, 3).unwrap() - 1.0).abs() < 1e-12);

        let n = 16 * 16 * 3;
        let g: Vec<f32> = (0..n).map(|i| i as f32 / (n - 1) as f32).collect();
        let h: Vec<f32> = g.iter().enumerate().map(|(i, &v)| v * 0.8 + 0.1 + 0.05 * (i as f32).sin()).collect();
        assert!((ssim(&g, &h, 16, 16, 3).unwrap() - 0.9025127631973974).abs() < 1e-4);
        assert_eq!(ssim(&g, &h, 16, 16, 3).unwrap(), ssim(&h, &g, 16, 16, 3).unwrap());
        assert!(matches!(ssim(&g, &h, 8, 8, 12), Err(Error::Shape(_))));
    }

    fn random_clips(n: usize, shift: f32, seed: u64) -> Vec<VideoClip> {
        let mut r = seeded_rng(seed);
        (0..n)
            .map(|_| VideoClip::new([2, 4, 4, 3], (0..96).map(|_| r.gen_range(0.0..0.5) + shift).collect()).unwrap())
            .collect()
    }

    #[test]
    fn proxy_fvd_identity_symmetry_and_shift() {
        let a = random_clips(20, 0.0, 1);
        let b = random_clips(20, 0.0, 2);
        assert!(proxy_fvd(&a, &a).unwrap().abs() < 1e-8);
        assert!((proxy_fvd(&a, &b).unwrap() - proxy_fvd(&b, &a).unwrap()).abs() < 1e-8);

        // a pure mean shift δ of the features gives ‖δ‖²
        let fa: Vec<Vec<f64>> = a.iter().map(clip_features).collect();
        let delta: Vec<f64> = (0..fa[0].len()).map(|i| 0.01 * (i % 5) as f64).collect();
        let fb: Vec<Vec<f64>> = fa.iter().map(|f| f.iter().zip(&delta).map(|(x, d)| x + d).collect()).collect();
        let d = frechet_distance(&gaussian_fit(&fa).unwrap(), &gaussian_fit(&fb).unwrap());
        let expected: f64 = delta.iter().map(|v| v * v).sum();
        assert!((d - expected).abs() < 1e-8, "{d} vs {expected}");
        assert!(matches!(proxy_fvd(&a[..1], &b), Err(Error::Shape(_))));
    }

    #[test]
    fn static_and_moving_sets_beat_the_permutation_baseline() {
        let dist = SceneDistribution::for_resolution(16, 4);
        let moving: Vec<VideoClip> = generate_dataset(64, &dist, 3).unwrap().into_iter().map(|c| c.0).collect();
        let still_dist = SceneDistribution { max_speed: 0.0, ..dist };
        let still: Vec<VideoClip> = generate_dataset(64, &still_dist, 4).unwrap().into_iter().map(|c| c.0).collect();
        let score = proxy_fvd(&still, &moving).unwrap();
        assert!(score > 0.0);
        let mut pool = moving.clone();
        pool.extend(still);
        let mut r = seeded_rng(5);
        let mut below = 0;
        for _ in 0..40 {
            pool.shuffle(&mut r);
            if proxy_fvd(&pool[..64], &pool[64..]).unwrap() < score {
                below += 1;
            }
        }
        assert!(below >= 38, "{below}/40 below {score}");
    }

    #[test]
    fn report_csv_layout() {
        let mut r = seeded_rng(1);
        let a: Vec<VideoClip> = (0..3).map(|_| VideoClip::new([2, 16, 16, 3], (0..1536).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()).collect();
        let names: Vec<String> = (0..3).map(|i| format!("{i:06}")).collect();
        let r = evaluate(&names, &a, &a, "abcd").unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "clip,psnr,ssim,proxy_fvd,clips,features,config_hash");
        assert!(lines[4].starts_with("summary,99.000000,"));
        assert!(lines[4].ends_with(",3,proxy-fvd-v2,abcd"));
    }
}
