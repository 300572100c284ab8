use rand::Rng;

use super::*;
use crate::nn::gradcheck::{check, GradCheckOptions};

fn tiny_cfg() -> RunConfig {
    RunConfig {
        resolution: 32,
        frames: 4,
        f_c: 2,
        f_u: 8,
        vae_hidden: 8,
        vae_res_layers: 1,
        channel_multiplies: vec![1],
        ..RunConfig::default()
    }
}

fn random_clip(cfg: &RunConfig, seed: u64) -> VideoClip {
    let mut rng = seeded_rng(seed);
    let dims = [cfg.frames, cfg.resolution, cfg.resolution, 3];
    let n = dims.iter().product();
    VideoClip::new(dims, (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
}

#[test]
fn default_latent_shapes_and_balance() {
    let cfg = RunConfig { vae_hidden: 8, vae_res_layers: 1, ..RunConfig::default() };
    let m = VaeModel::init(&cfg, 0).unwrap();
    let b = m.encode(&random_clip(&cfg, 1)).unwrap();
    assert_eq!(b.common.shape(), &[1, 16, 16, 3]);
    assert_eq!(b.unique.shape(), &[16, 4, 4, 3]);
    assert_eq!(m.arch.merge.ladder(), vec![4, 8, 16]);
    // 128² full layout: 32·32·3 common elements equal 16·8·8·3 unique elements
    let full = RunConfig::full();
    let c: usize = full.common_shape().iter().product();
    let u: usize = full.unique_shape().iter().product();
    assert_eq!((c, u), (3072, 3072));
}

#[test]
fn full_resolution_shapes() {
    let cfg = RunConfig { vae_hidden: 4, vae_res_layers: 1, ..RunConfig::full() };
    let m = VaeModel::init(&cfg, 0).unwrap();
    let b = m.encode(&random_clip(&cfg, 1)).unwrap();
    assert_eq!(b.common.shape(), &[1, 32, 32, 3]);
    assert_eq!(b.unique.shape(), &[16, 8, 8, 3]);
    assert_eq!(m.arch.merge.ladder(), vec![8, 16, 32]);
}

#[test]
fn encoding_is_deterministic_and_reconstruct_keeps_shape() {
    let cfg = tiny_cfg();
    let m = VaeModel::init(&cfg, 3).unwrap();
    let clip = random_clip(&cfg, 4);
    let a = m.encode(&clip).unwrap();
    let b = m.encode(&clip).unwrap();
    assert_eq!(a.common.data(), b.common.data());
    assert_eq!(a.unique.data(), b.unique.data());
    let r = m.reconstruct(&clip).unwrap();
    assert_eq!(r.dims, clip.dims);
    assert!(r.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn identical_frames_are_permutation_invariant() {
    let cfg = tiny_cfg();
    let m = VaeModel::init(&cfg, 5).unwrap();
    let one = random_clip(&RunConfig { frames: 1, ..cfg.clone() }, 6);
    let data: Vec<f32> = (0..cfg.frames).flat_map(|_| one.data.clone()).collect();
    let clip = VideoClip::new([cfg.frames, 32, 32, 3], data).unwrap();
    let x = clip.to_tensor();
    let p = Binding::frozen(&m.params);
    let a = m.arch.encode_common(&p, &x, None).unwrap();
    let b = m.arch.encode_common(&p, &x.index_select(0, &[2, 0, 3, 1]), None).unwrap();
    assert_eq!(a.mean.data(), b.mean.data());
}

#[test]
fn wrong_frame_count_is_a_shape_error() {
    let cfg = tiny_cfg();
    let m = VaeModel::init(&cfg, 0).unwrap();
    let short = random_clip(&RunConfig { frames: 3, ..cfg.clone() }, 1);
    let p = Binding::frozen(&m.params);
    assert!(matches!(m.arch.encode_common(&p, &short.to_tensor(), None), Err(Error::Shape(_))));
    assert!(m.arch.encode_unique(&p, &short.to_tensor(), None).is_ok());
    let empty = Tensor::<f32>::zeros(&[0, 32, 32, 3]);
    assert!(matches!(m.arch.encode_unique(&p, &empty, None), Err(Error::Shape(_))));
}

#[test]
fn temporal_attention_rows_sum_to_one_and_single_frame_is_identity_weight() {
    let cfg = tiny_cfg();
    let m = VaeModel::init(&cfg, 2).unwrap();
    let p = Binding::frozen(&m.params);
    let (_, w) = m.arch.enc_u.forward_with_weights(&p, &random_clip(&cfg, 8).to_tensor());
    assert_eq!(w.dim(1), cfg.frames);
    for row in w.data().chunks(cfg.frames) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    let single = random_clip(&RunConfig { frames: 1, ..cfg.clone() }, 9).to_tensor();
    let (_, w1) = m.arch.enc_u.forward_with_weights(&p, &single);
    assert!(w1.data().iter().all(|&v| v == 1.0));
}

#[test]
fn bias_free_merge_maps_zero_to_zero() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(0);
    let merge = MergeCascade::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 8, 2, 2, false);
    let p = Binding::frozen(&store);
    let out = merge.forward(&p, &Tensor::zeros(&[1, 8, 8, 3]), &Tensor::zeros(&[2, 2, 2, 3])).unwrap();
    assert_eq!(out.shape(), &[2, 8, 8, 8]);
    assert!(out.data().iter().all(|&v| v == 0.0));
    let bad = merge.forward(&p, &Tensor::zeros(&[1, 8, 8, 2]), &Tensor::zeros(&[2, 2, 2, 3]));
    assert!(matches!(bad, Err(Error::Shape(_))));
}

#[test]
fn merge_depends_on_the_common_latent() {
    let cfg = tiny_cfg();
    let m = VaeModel::init(&cfg, 1).unwrap();
    let a = m.encode(&random_clip(&cfg, 10)).unwrap();
    let b = m.encode(&random_clip(&cfg, 11)).unwrap();
    let p = Binding::frozen(&m.params);
    let fa = m.arch.merge.forward(&p, &a.common, &a.unique).unwrap();
    let fb = m.arch.merge.forward(&p, &b.common, &a.unique).unwrap();
    assert_ne!(fa.data(), fb.data());
}

#[test]
fn decoder_is_per_frame() {
    let cfg = tiny_cfg();
    let m = VaeModel::init(&cfg, 7).unwrap();
    let bundle = m.encode(&random_clip(&cfg, 12)).unwrap();
    let p = Binding::frozen(&m.params);
    let fused = m.arch.merge.forward(&p, &bundle.common, &bundle.unique).unwrap();
    let base = m.arch.dec.forward(&p, &fused);
    let mut perturbed = fused.to_vec();
    let per = fused.numel() / cfg.frames;
    for v in &mut perturbed[per..2 * per] {
        *v += 1.0;
    }
    let out = m.arch.dec.forward(&p, &Tensor::from_vec(fused.shape(), perturbed));
    let frame = base.numel() / cfg.frames;
    assert_eq!(base.data()[..frame], out.data()[..frame]);
    assert_ne!(base.data()[frame..2 * frame], out.data()[frame..2 * frame]);

    // permuting unique latents permutes decoded frames
    let order = [3, 1, 0, 2];
    let permuted = LatentBundle::new(bundle.common.clone(), bundle.unique.index_select(0, &order), bundle.config_hash.clone());
    let a = m.decode(&bundle).unwrap();
    let b = m.decode(&permuted).unwrap();
    for (i, &src) in order.iter().enumerate() {
        assert_eq!(b.frame(i), a.frame(src));
    }
}

#[test]
fn swap_with_itself_is_reconstruction() {
    let cfg = tiny_cfg();
    let m = VaeModel::init(&cfg, 4).unwrap();
    let a = random_clip(&cfg, 13);
    let b = random_clip(&cfg, 14);
    assert_eq!(m.swap_recompose(&a, &a).unwrap(), m.reconstruct(&a).unwrap());
    assert_eq!(m.swap_recompose(&a, &b).unwrap().dims, b.dims);
    let other = VaeModel::init(&RunConfig { frames: 2, ..cfg.clone() }, 4).unwrap();
    let short = random_clip(&RunConfig { frames: 2, ..cfg }, 1);
    let bundle = other.encode(&short).unwrap();
    assert!(matches!(m.decode(&LatentBundle { common: Tensor::zeros(&[1, 3, 3, 3]), ..bundle }), Err(Error::Shape(_))));
}

#[test]
fn tiny_logvar_sample_equals_mean() {
    let moments = Tensor::from_vec(&[1, 1, 1, 2], vec![0.7f64, -100.0]);
    let lat = GaussianLatent::from_moments(&moments, 1, Some(&mut seeded_rng(0)));
    assert_eq!(lat.logvar.data()[0], LOGVAR_MIN);
    assert!((lat.sample.data()[0] - 0.7).abs() < 1e-6);
}

#[test]
fn merge_cascade_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(21);
    let merge = MergeCascade::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 4, 2, 1, true);
    let mut r = seeded_rng(22);
    let mut randn = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    };
    let inputs = [randn(&[1, 4, 4, 3]), randn(&[2, 2, 2, 3])];
    let report = check(&store, &inputs, GradCheckOptions::default(), |p, xs| merge.forward(p, &xs[0], &xs[1]).unwrap());
    assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
}

#[test]
fn temporal_attention_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(31);
    let attn = TemporalAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "t", 4);
    // the output projection starts at zero; give it values so every path is exercised
    for e in store.entries_mut() {
        if e.name.contains("proj") {
            for v in e.data.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let x: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = check(&store, &[Tensor::from_vec(&[2, 4, 4, 4], x)], GradCheckOptions::default(), |p, xs| {
        attn.forward(p, &xs[0], 2)
    });
    assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
}

#[test]
fn whole_autoencoder_gradients() {
    let cfg = RunConfig { resolution: 16, frames: 2, f_c: 2, f_u: 8, vae_hidden: 8, vae_res_layers: 1, block_factor: 1, channel_multiplies: vec![1], ..RunConfig::default() };
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(41);
    let arch = CuVae::build(&cfg, &mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    let x: Vec<f64> = (0..2 * 16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x = Tensor::from_vec(&[2, 16, 16, 3], x);
    let opts = GradCheckOptions { max_coords: 12, ..GradCheckOptions::default() };
    let report = check(&store, &[], opts, |p, _| {
        let enc = arch.encode(p, &x, None).unwrap();
        arch.decode(p, &enc.common.mean, &enc.unique.mean).unwrap().sub(&x).square()
    });
    for e in &report.entries {
        assert!(e.rel_error < 1e-4, "{e:?}");
    }
}
