use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::nn::gradcheck::{check, GradCheckOptions};
use crate::nn::{seeded_rng, ParamStore};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let n = numel(shape);
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let n = numel(shape);
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.5..2.0)).collect())
}

fn assert_grads(inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) {
    let store = ParamStore::new();
    let report = check(&store, inputs, GradCheckOptions { max_coords: 200, ..Default::default() }, |_, xs| f(xs));
    let worst = report.worst().unwrap();
    assert!(report.max_rel_error() < 1e-6, "worst {worst:?}");
}

#[test]
fn elementwise_broadcast_grads() {
    let a = randn(&[2, 3, 4], 1);
    let b = randn(&[3, 1], 2);
    let c = positive(&[1, 1, 4], 3);
    assert_grads(&[a.clone(), b.clone()], |x| x[0].add(&x[1]));
    assert_grads(&[a.clone(), b.clone()], |x| x[0].sub(&x[1]));
    assert_grads(&[a.clone(), b.clone()], |x| x[0].mul(&x[1]));
    assert_grads(&[a.clone(), c.clone()], |x| x[0].div(&x[1]));
    assert_grads(&[b, a], |x| x[0].mul(&x[1]));
}

#[test]
fn unary_grads() {
    let a = randn(&[3, 5], 4);
    let p = positive(&[3, 5], 5);
    assert_grads(&[a.clone()], |x| x[0].silu());
    assert_grads(&[a.clone()], |x| x[0].sigmoid());
    assert_grads(&[a.clone()], |x| x[0].softplus());
    assert_grads(&[a.clone()], |x| x[0].exp());
    assert_grads(&[a.clone()], |x| x[0].square().scale(0.3).add_scalar(2.0));
    assert_grads(&[a.clone()], |x| x[0].leaky_relu(0.2));
    assert_grads(&[p.clone()], |x| x[0].ln());
    assert_grads(&[p], |x| x[0].sqrt());
    assert_grads(&[a], |x| x[0].abs());
}

#[test]
fn reduction_and_layout_grads() {
    let a = randn(&[2, 3, 4], 6);
    assert_grads(&[a.clone()], |x| x[0].sum_keepdim(&[0, 2]));
    assert_grads(&[a.clone()], |x| x[0].mean_keepdim(&[1]));
    assert_grads(&[a.clone()], |x| x[0].mean_all());
    assert_grads(&[a.clone()], |x| x[0].permute(&[2, 0, 1]));
    assert_grads(&[a.clone()], |x| x[0].narrow(1, 1, 2));
    assert_grads(&[a.clone()], |x| x[0].index_select(1, &[2, 0, 2]));
    assert_grads(&[a.clone()], |x| x[0].reshape(&[6, 4]).softmax());
    assert_grads(&[a.clone(), randn(&[2, 1, 4], 7)], |x| Tensor::cat(&[x[0].clone(), x[1].clone()], 1));
    assert_grads(&[randn(&[3, 1], 8)], |x| x[0].broadcast_to(&[2, 3, 4]));
}

#[test]
fn matmul_grads_all_layouts() {
    assert_grads(&[randn(&[2, 3, 4], 9), randn(&[4, 5], 10)], |x| x[0].matmul(&x[1]));
    assert_grads(&[randn(&[2, 3, 4], 11), randn(&[2, 4, 5], 12)], |x| x[0].matmul(&x[1]));
    assert_grads(&[randn(&[2, 3, 4], 13), randn(&[2, 5, 4], 14)], |x| x[0].matmul_t(&x[1]));
    assert_grads(&[randn(&[2, 3, 4], 15), randn(&[5, 4], 16)], |x| x[0].matmul_t(&x[1]));
}

#[test]
fn conv_pool_norm_grads() {
    let x = randn(&[2, 5, 6, 3], 17);
    assert_grads(&[x.clone(), randn(&[3, 3, 3, 4], 18)], |v| v[0].conv2d(&v[1], 1, 1));
    assert_grads(&[x.clone(), randn(&[4, 4, 3, 2], 19)], |v| v[0].conv2d(&v[1], 2, 1));
    assert_grads(&[x.clone(), randn(&[1, 1, 3, 2], 20)], |v| v[0].conv2d(&v[1], 1, 0));
    assert_grads(&[randn(&[2, 4, 6, 3], 21)], |v| v[0].avg_pool(2));
    assert_grads(&[x.clone()], |v| v[0].upsample_nearest(2));
    assert_grads(&[randn(&[2, 3, 3, 4], 22)], |v| v[0].group_norm(2, 1e-5).mul(&v[0]));
}

/// Direct 7-loop convolution used as an oracle.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, h, wd, ci) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw, _, co) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * co];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for c in 0..ci {
                                let xv = x.data()[((b * h + iy as usize) * wd + ix as usize) * ci + c];
                                let wv = w.data()[((ky * kw + kx) * ci + c) * co + o];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * ho + oy) * wo + ox) * co + o] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let x = randn(&[2, 7, 5, 3], 30);
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (4, 4, 0)] {
        let w = randn(&[k, k, 3, 4], 31 + k as u64);
        let got = x.conv2d(&w, s, p);
        let want = naive_conv(&x, &w, s, p);
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "k={k} s={s} p={p} err={err}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let y = randn(&[4, 9], 40).scale(30.0).softmax();
    for row in y.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn group_norm_standardises_each_group() {
    let y = randn(&[2, 4, 4, 6], 41).scale(5.0).add_scalar(3.0).group_norm(3, 0.0);
    for b in 0..2 {
        for g in 0..3 {
            let vals: Vec<f64> = (0..16).flat_map(|s| (0..2).map(move |c| (s, c))).map(|(s, c)| y.data()[b * 96 + s * 6 + g * 2 + c]).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn no_graph_without_grad_inputs() {
    let a = randn(&[3], 50);
    let y = a.exp().sum_all();
    assert!(!y.requires_grad());
    let g = y.backward();
    assert!(g.get(&a).is_none());
}

#[test]
fn shared_subgraph_accumulates() {
    let x = Tensor::param(&[1], vec![3.0f64]);
    let y = x.mul(&x).add(&x.scale(2.0));
    let g = y.sum_all().backward();
    assert_eq!(g.get(&x).unwrap()[0], 2.0 * 3.0 + 2.0);
}
