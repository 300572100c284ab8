use rand::Rng;

use super::*;
use crate::config::PeTarget;

fn tiny_cfg() -> RunConfig {
    RunConfig {
        resolution: 32,
        frames: 2,
        f_c: 4,
        f_u: 16,
        model_dim: 8,
        channel_multiplies: vec![1],
        attention_resolutions: vec![8, 4, 2],
        ..RunConfig::default()
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = seeded_rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Inputs for a batch of `b` clips at a shared time.
fn inputs(cfg: &RunConfig, b: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Vec<f64>) {
    let [h, w, d] = cfg.common_shape();
    let [t, hu, wu, _] = cfg.unique_shape();
    (randn(&[b, h, w, d], seed), randn(&[b * t, hu, wu, d], seed + 1), shared_times(&vec![0.3; b], t))
}

/// Gives every zero-initialised projection random weights so all paths carry signal.
fn wake(store: &mut ParamStore<f32>, seed: u64) {
    let mut r = seeded_rng(seed);
    for e in store.entries_mut() {
        if e.data.iter().all(|&v| v == 0.0) && e.name.ends_with("weight") {
            for v in e.data.iter_mut() {
                *v = r.gen_range(-0.2..0.2);
            }
        }
    }
}

#[test]
fn default_architecture_contract() {
    let cfg = RunConfig::default();
    let m = LdmModel::init(&cfg, 0).unwrap();
    let a = &m.arch;
    assert_eq!(a.common.levels(), a.unique.levels() + 2);
    assert_eq!(a.common.sides, vec![16, 8, 4, 2]);
    assert_eq!(a.unique.sides, vec![4, 2]);
    assert!(a.unique.has_temporal_attention() && !a.common.has_temporal_attention());
    for &side in &a.unique.sides {
        assert!(a.joints.iter().any(|j| j.side == side));
    }
    assert_eq!(a.joints[0].encoder.blocks, 2);
    let (c, u, t) = inputs(&cfg, 1, 1);
    let p = Binding::frozen(&m.params);
    let out = a.predict_noise(&p, &c, &u, &t).unwrap();
    assert_eq!(out.common.shape(), c.shape());
    assert_eq!(out.unique.shape(), u.shape());
}

#[test]
fn output_head_starts_at_zero_and_prediction_is_deterministic() {
    let cfg = tiny_cfg();
    let mut m = LdmModel::init(&cfg, 3).unwrap();
    let (c, u, t) = inputs(&cfg, 2, 4);
    {
        let p = Binding::frozen(&m.params);
        let out = m.arch.predict_noise(&p, &c, &u, &t).unwrap();
        assert!(out.common.data().iter().chain(out.unique.data()).all(|&v| v == 0.0));
    }
    wake(&mut m.params, 5);
    let p = Binding::frozen(&m.params);
    let a = m.arch.predict_noise(&p, &c, &u, &t).unwrap();
    let b = m.arch.predict_noise(&p, &c, &u, &t).unwrap();
    assert_eq!(a.common.data(), b.common.data());
    assert_eq!(a.unique.data(), b.unique.data());
    assert!(a.common.data().iter().any(|&v| v != 0.0));
}

#[test]
fn zeroed_joint_projections_decouple_the_streams() {
    let cfg = tiny_cfg();
    let mut m = LdmModel::init(&cfg, 6).unwrap();
    wake(&mut m.params, 7);
    let (c, u, t) = inputs(&cfg, 1, 8);
    let u2 = u.add_scalar(0.5);
    let common_out = |m: &LdmModel, u: &Tensor<f32>| {
        let p = Binding::frozen(&m.params);
        m.arch.predict_noise(&p, &c, u, &t).unwrap().common.to_vec()
    };
    assert_ne!(common_out(&m, &u), common_out(&m, &u2));
    for e in m.params.entries_mut() {
        if e.name.starts_with("joint") && e.name.contains(".proj.") {
            e.data.fill(0.0);
        }
    }
    assert_eq!(common_out(&m, &u), common_out(&m, &u2));
}

#[test]
fn per_part_time_is_used() {
    let cfg = tiny_cfg();
    let mut m = LdmModel::init(&cfg, 9).unwrap();
    wake(&mut m.params, 10);
    let (c, u, t) = inputs(&cfg, 1, 11);
    let p = Binding::frozen(&m.params);
    let a = m.arch.predict_noise(&p, &c, &u, &t).unwrap();
    let mut t2 = t.clone();
    t2[0] = 0.0;
    let b = m.arch.predict_noise(&p, &c, &u, &t2).unwrap();
    assert_ne!(a.common.data(), b.common.data());
}

#[test]
fn attention_export_covers_every_joint_module() {
    let cfg = tiny_cfg();
    let m = LdmModel::init(&cfg, 0).unwrap();
    let (c, u, t) = inputs(&cfg, 1, 1);
    let p = Binding::frozen(&m.params);
    let (_, maps) = m.arch.predict_noise_with_attention(&p, &c, &u, &t).unwrap();
    assert_eq!(maps.len(), 2 * m.arch.joints.len());
    for w in &maps {
        for row in w.data().chunks(w.dim(2)) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn input_errors() {
    let cfg = tiny_cfg();
    let m = LdmModel::init(&cfg, 0).unwrap();
    let (c, u, t) = inputs(&cfg, 1, 1);
    let p = Binding::frozen(&m.params);
    assert!(matches!(m.arch.predict_noise(&p, &c, &u, &t[1..]), Err(Error::Shape(_))));
    assert!(matches!(m.arch.predict_noise(&p, &c, &u.narrow(0, 0, 1), &t), Err(Error::Shape(_))));
    let mut bad = t.clone();
    bad[1] = 1.5;
    assert!(matches!(m.arch.predict_noise(&p, &c, &u, &bad), Err(Error::Domain(_))));
}

#[test]
fn joint_modules_can_be_disabled_and_targets_switched() {
    let off = RunConfig { joint_modules: false, ..tiny_cfg() };
    assert!(LdmModel::init(&off, 0).unwrap().arch.joints.is_empty());
    let qk = RunConfig { pe_target: PeTarget::Qk, ..tiny_cfg() };
    assert_eq!(LdmModel::init(&qk, 0).unwrap().arch.joints[0].encoder.target, PeTarget::Qk);
}

#[test]
fn latent_scale_normalises_spread() {
    let c = [1.0f32, -1.0, 1.0, -1.0];
    let u = [0.0f32, 0.0, 0.0];
    let s = LatentScale::fit([(&c[..], &u[..])]);
    assert_eq!(s, LatentScale { common: 1.0, unique: 1.0 });
    let c2 = [2.0f32, -2.0];
    assert_eq!(LatentScale::fit([(&c2[..], &u[..])]).common, 0.5);
}
