use std::cell::RefCell;

use super::*;

fn tiny_cfg() -> RunConfig {
    RunConfig {
        resolution: 32,
        frames: 4,
        f_c: 4,
        f_u: 16,
        model_dim: 8,
        channel_multiplies: vec![1],
        diffusion_steps: 50,
        ..RunConfig::default()
    }
}

/// Returns a fixed ε everywhere and counts calls.
struct ConstNoise {
    cfg: RunConfig,
    value: f32,
    calls: RefCell<usize>,
}

impl Denoiser for ConstNoise {
    fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    fn predict(&self, common: &[f32], unique: &[f32], _times: &[f64]) -> Result<(Vec<f32>, Vec<f32>)> {
        *self.calls.borrow_mut() += 1;
        Ok((vec![self.value; common.len()], vec![self.value; unique.len()]))
    }
}

/// Knows the clean latents and returns the exact noise of the current iterate.
struct Oracle {
    cfg: RunConfig,
    schedule: NoiseSchedule,
    z0: Vec<f32>,
    seen: RefCell<Vec<Vec<f32>>>,
}

impl Denoiser for Oracle {
    fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    fn predict(&self, common: &[f32], unique: &[f32], times: &[f64]) -> Result<(Vec<f32>, Vec<f32>)> {
        let z: Vec<f32> = common.iter().chain(unique).copied().collect();
        self.seen.borrow_mut().push(z.clone());
        let s = (times[0] * self.schedule.steps() as f64).round() as usize;
        let ab = self.schedule.alpha_bar(s);
        let eps: Vec<f32> = z.iter().zip(&self.z0).map(|(&z, &z0)| ((z as f64 - ab.sqrt() * z0 as f64) / (1.0 - ab).sqrt()) as f32).collect();
        let (c, u) = eps.split_at(common.len());
        Ok((c.to_vec(), u.to_vec()))
    }
}

fn sizes(cfg: &RunConfig) -> (usize, usize) {
    latent_sizes(cfg)
}

#[test]
fn oracle_reverse_follows_the_posterior_mean_trajectory() {
    let cfg = tiny_cfg();
    let (nc, nu) = sizes(&cfg);
    let n = nc + nu * cfg.frames;
    let mut rng = seeded_rng(0);
    let z0: Vec<f32> = standard_normal(&mut rng, n);
    let mut sampler = Sampler::new(&cfg, 1).unwrap();
    sampler.noise_scale = 0.0;
    let eps: Vec<f32> = standard_normal(&mut rng, n);
    let z_s = sampler.schedule.forward_sample(&z0, 50, &eps).unwrap();
    let oracle = Oracle { cfg: cfg.clone(), schedule: sampler.schedule.clone(), z0: z0.clone(), seen: RefCell::new(Vec::new()) };
    let (mut c, mut u) = (z_s[..nc].to_vec(), z_s[nc..].to_vec());
    sampler.reverse(&oracle, &mut c, &mut u, &PartMask::all(cfg.frames), &mut rng).unwrap();

    // closed-form chain of posterior means, started from the same z_S
    let mut expected: Vec<f64> = z_s.iter().map(|&v| v as f64).collect();
    let seen = oracle.seen.borrow();
    assert_eq!(seen.len(), 50);
    for (i, s) in (1..=50).rev().enumerate() {
        let worst = seen[i].iter().zip(&expected).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3, "step {s}: {worst}");
        expected = expected.iter().zip(&z0).map(|(&z, &z0)| sampler.schedule.posterior_mean(z, z0 as f64, s).unwrap()).collect();
    }
    let got: Vec<f32> = c.iter().chain(&u).copied().collect();
    let worst = got.iter().zip(&expected).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "final: {worst}");
}

#[test]
fn strategy_table() {
    let ids: Vec<(bool, bool, bool)> = (1..=6).map(|i| {
        let s = Strategy::new(i).unwrap();
        (s.common_evolves(), s.unique_evolves(), s.resets_common())
    }).collect();
    assert_eq!(
        ids,
        vec![(true, true, false), (true, true, true), (false, true, false), (true, false, false), (true, false, true), (false, false, false)]
    );
    assert!(matches!(Strategy::new(0), Err(Error::Config(_))));
    assert!(matches!("7".parse::<Strategy>(), Err(Error::Config(_))));
    assert_eq!("6".parse::<Strategy>().unwrap(), Strategy::DEFAULT);
}

#[test]
fn apply_strategy_cases() {
    let start = (&[1.0f32][..], &[2.0f32][..]);
    let current = (&[3.0f32][..], &[4.0f32][..]);
    let stepped = (&[5.0f32][..], &[6.0f32][..]);
    let s = |i| Strategy::new(i).unwrap();
    for boundary in [false, true] {
        assert_eq!(apply_strategy(s(6), start, current, stepped, boundary), (vec![3.0], vec![4.0]));
    }
    assert_eq!(apply_strategy(s(2), start, current, stepped, true), (vec![1.0], vec![6.0]));
    assert_eq!(apply_strategy(s(2), start, current, stepped, false), (vec![5.0], vec![6.0]));
    assert_eq!(apply_strategy(s(5), start, current, stepped, true), (vec![1.0], vec![4.0]));
    assert_eq!(apply_strategy(s(3), start, current, stepped, false), (vec![3.0], vec![6.0]));
    // 4 and 6 part ways on the common latent after a step
    assert_ne!(apply_strategy(s(4), start, current, stepped, false).0, apply_strategy(s(6), start, current, stepped, false).0);
}

#[test]
fn strategy_four_and_six_diverge_in_common_after_one_window() {
    let cfg = RunConfig { diffusion_steps: 2, ..tiny_cfg() };
    let (nc, nu) = sizes(&cfg);
    let model = ConstNoise { cfg: cfg.clone(), value: 0.3, calls: RefCell::new(0) };
    let sampler = Sampler::new(&cfg, 1).unwrap();
    let common = vec![0.5; nc];
    let frames = vec![0.1; nu * cfg.frames];
    let run = |id| extend_scaled(&model, &sampler, common.clone(), frames.clone(), 2, Strategy::new(id).unwrap(), 1, |_, _| {}).unwrap();
    let (c4, _) = run(4);
    let (c6, _) = run(6);
    assert_eq!(c6, common);
    assert_ne!(c4, common);
}

#[test]
fn extension_window_arithmetic_and_frozen_conditionals() {
    let cfg = RunConfig { frames: 16, diffusion_steps: 3, ..tiny_cfg() };
    let (nc, nu) = sizes(&cfg);
    let model = ConstNoise { cfg: cfg.clone(), value: 0.2, calls: RefCell::new(0) };
    let sampler = Sampler::new(&cfg, 1).unwrap();
    let mut rng = seeded_rng(4);
    let common: Vec<f32> = standard_normal(&mut rng, nc);
    let frames: Vec<f32> = standard_normal(&mut rng, nu * 16);
    let mut windows = Vec::new();
    let (c, u) = extend_scaled(&model, &sampler, common.clone(), frames.clone(), 48, Strategy::DEFAULT, 9, |c, u| windows.push((c.to_vec(), u.to_vec()))).unwrap();
    assert_eq!(windows.len(), 6);
    assert_eq!(u.len() / nu, 64);
    assert_eq!(*model.calls.borrow(), 6 * 3);
    assert_eq!(c, common);
    assert_eq!(u[..16 * nu], frames[..]);
    for (i, (wc, wu)) in windows.iter().enumerate() {
        // conditionals are the 8 frames preceding each window, untouched
        assert_eq!(wc, &common);
        let first = 8 + 8 * i;
        assert_eq!(wu[..], u[first * nu..(first + 8) * nu]);
    }
    assert!(matches!(
        extend_scaled(&model, &sampler, common, frames, 8, Strategy::DEFAULT, 0, |_, _| {}).map(|_| ()),
        Ok(())
    ));
}

#[test]
fn strategy_one_conditionals_follow_the_target_dynamics() {
    let cfg = RunConfig { diffusion_steps: 5, ..tiny_cfg() };
    let (nc, nu) = sizes(&cfg);
    let model = ConstNoise { cfg: cfg.clone(), value: 0.25, calls: RefCell::new(0) };
    let mut sampler = Sampler::new(&cfg, 1).unwrap();
    sampler.noise_scale = 0.0;
    let common = vec![0.7f32; nc];
    let frames: Vec<f32> = (0..nu * cfg.frames).map(|i| (i % 7) as f32 * 0.1).collect();
    let mut seen = None;
    extend_scaled(&model, &sampler, common.clone(), frames.clone(), 2, Strategy::new(1).unwrap(), 11, |c, u| seen = Some((c.to_vec(), u.to_vec()))).unwrap();
    let (c, u) = seen.unwrap();

    // replay: corrupt the starts to step S with the same draws, then apply the shared reverse steps
    let mut rng = seeded_rng(11);
    let sched = &sampler.schedule;
    let renoise = |z: &[f32], rng: &mut ChaCha8Rng| {
        let e: Vec<f32> = standard_normal(rng, z.len());
        sched.forward_sample(z, 5, &e).unwrap()
    };
    let mut ec = renoise(&common, &mut rng);
    let mut eu = renoise(&frames[2 * nu..], &mut rng);
    for s in (1..=5).rev() {
        let zero_c = vec![0.0f32; nc];
        let zero_u = vec![0.0f32; eu.len()];
        ec = sched.reverse_step(&ec, &vec![0.25; nc], s, &zero_c).unwrap();
        eu = sched.reverse_step(&eu, &vec![0.25; eu.len()], s, &zero_u).unwrap();
    }
    assert_eq!(c, ec);
    assert_eq!(u, eu);
}

#[test]
fn extension_rejects_bad_windows() {
    let cfg = tiny_cfg();
    let model = LdmModel::init(&cfg, 0).unwrap();
    let sampler = Sampler::new(&cfg, 10).unwrap();
    let start = sample_unconditional(&model, &sampler, 0).unwrap();
    assert!(matches!(extend_iteratively(&model, &sampler, &start, 3, Strategy::DEFAULT, 0), Err(Error::Config(_))));
    let odd = RunConfig { frames: 3, ..cfg };
    let m3 = LdmModel::init(&odd, 0).unwrap();
    let s3 = sample_unconditional(&m3, &sampler, 0).unwrap();
    assert!(matches!(extend_iteratively(&m3, &sampler, &s3, 2, Strategy::DEFAULT, 0), Err(Error::Config(_))));
}

#[test]
fn unconditional_sampling_is_deterministic_for_any_stride() {
    let cfg = tiny_cfg();
    let model = LdmModel::init(&cfg, 2).unwrap();
    for stride in [1, 7] {
        let sampler = Sampler::new(&cfg, stride).unwrap();
        let a = sample_unconditional(&model, &sampler, 5).unwrap();
        let b = sample_unconditional(&model, &sampler, 5).unwrap();
        a.check_shapes(&cfg).unwrap();
        assert_eq!(a.frames(), cfg.frames);
        assert_eq!(a.common.data(), b.common.data());
        assert_eq!(a.unique.data(), b.unique.data());
        let c = sample_unconditional(&model, &sampler, 6).unwrap();
        assert_ne!(a.common.data(), c.common.data());
    }
}

#[test]
fn sample_video_extends_and_records_a_manifest() {
    let cfg = tiny_cfg();
    let model = LdmModel::init(&cfg, 2).unwrap();
    let sampler = Sampler::new(&cfg, 25).unwrap();
    let (b, m) = sample_video(&model, &sampler, 8, Strategy::DEFAULT, 3).unwrap();
    assert_eq!(b.frames(), 8);
    let (b2, _) = sample_video(&model, &sampler, 8, Strategy::DEFAULT, 3).unwrap();
    assert_eq!(b.unique.data(), b2.unique.data());
    assert_eq!(m.to_text(), format!("seed = 3\nstrategy = 6\nframes = 8\nsteps = 50\nstride = 25\nconfig_hash = {}\n", cfg.hash()));
}

#[test]
fn nan_predictions_are_sampling_divergence() {
    let cfg = tiny_cfg();
    let model = ConstNoise { cfg: cfg.clone(), value: f32::NAN, calls: RefCell::new(0) };
    let sampler = Sampler::new(&cfg, 1).unwrap();
    let (nc, nu) = sizes(&cfg);
    let (mut c, mut u) = (vec![0.0; nc], vec![0.0; nu * cfg.frames]);
    let r = sampler.reverse(&model, &mut c, &mut u, &PartMask::all(cfg.frames), &mut seeded_rng(0));
    assert!(matches!(r, Err(Error::SamplingDivergence { step: 50 })));
}

#[test]
fn conditional_generation_keeps_fixed_parts() {
    let cfg = tiny_cfg();
    let mut model = LdmModel::init(&cfg, 4).unwrap();
    model.scale = crate::ldm::LatentScale { common: 0.3, unique: 1.7 };
    let sampler = Sampler::new(&cfg, 10).unwrap();
    let src = sample_unconditional(&model, &sampler, 1).unwrap();

    let keep_u = conditional_generate(&model, &sampler, &ConditionSpec::from_bundle(&src, false, true), 2).unwrap();
    assert_eq!(keep_u.unique.data(), src.unique.data());
    assert_ne!(keep_u.common.data(), src.common.data());

    let keep_c = conditional_generate(&model, &sampler, &ConditionSpec::from_bundle(&src, true, false), 2).unwrap();
    assert_eq!(keep_c.common.data(), src.common.data());
    assert_ne!(keep_c.unique.data(), src.unique.data());

    let all = ConditionSpec::from_bundle(&src, true, true);
    assert!(matches!(conditional_generate(&model, &sampler, &all, 0), Err(Error::NoOp(_))));
    let mut bad = ConditionSpec::from_bundle(&src, true, false);
    bad.fixed_unique.push((0, src.unique.narrow(0, 0, 1)));
    assert!(matches!(conditional_generate(&model, &sampler, &bad, 0), Err(Error::Range(_))));
}
