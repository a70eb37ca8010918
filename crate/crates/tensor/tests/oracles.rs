//! Kernel outputs against brute-force reference implementations and
//! hand-evaluated values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsfme_tensor::ops::{self, NormStats};
use rsfme_tensor::{ConvSpec, PoolSpec, Tensor};

/// Nested-loop cross-correlation with explicit zero padding and groups.
fn conv_oracle(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw) = spec.kernel;
    let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
    let ow = (wd + 2 * spec.pad - kw) / spec.stride + 1;
    let k = spec.out_channels;
    let cg = c / spec.groups;
    let kg = k / spec.groups;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for ni in 0..n {
        for ko in 0..k {
            let g = ko / kg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[ko]);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as i64 - spec.pad as i64;
                                let ix = (ox * spec.stride + kx) as i64 - spec.pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                s += x.at(&[ni, g * cg + ci, iy as usize, ix as usize])
                                    * w.at(&[ko, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[ni, ko, oy, ox], s);
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor, spec: &PoolSpec) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = (h - spec.size) / spec.stride + 1;
    let ow = (w - spec.size) / spec.stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals = Vec::new();
                    for dy in 0..spec.size {
                        for dx in 0..spec.size {
                            vals.push(x.at(&[
                                ni,
                                ci,
                                oy * spec.stride + dy,
                                ox * spec.stride + dx,
                            ]));
                        }
                    }
                    let v = match spec.mode {
                        rsfme_tensor::PoolMode::Max => {
                            vals.iter().cloned().fold(f64::MIN, f64::max)
                        }
                        rsfme_tensor::PoolMode::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    };
                    out.set(&[ni, ci, oy, ox], v);
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_3x3_pad1() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let spec = ConvSpec::new(1, 1, 3, 1, 1);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let y = ops::conv2d(&x, &spec, &w, None).unwrap();
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    assert_eq!(conv_oracle(&x, &spec, &w, None), y);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::rand_uniform(&[2, 1, 4, 5], -1.0, 1.0, &mut rng);
    let spec = ConvSpec::new(1, 1, 1, 1, 0);
    let y = ops::conv2d(
        &x,
        &spec,
        &Tensor::ones(&[1, 1, 1, 1]),
        Some(&Tensor::zeros(&[1])),
    )
    .unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_random_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
    let spec = ConvSpec::new(2, 3, 3, 1, 1);
    let w = Tensor::rand_uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
    let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
    let y = ops::conv2d(&x, &spec, &w, Some(&b)).unwrap();
    assert!(y.approx_eq(&conv_oracle(&x, &spec, &w, Some(&b)), 1e-6));
}

#[test]
fn conv_model_geometries_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let specs = [
        ConvSpec::new(3, 4, 3, 1, 1),
        ConvSpec::new(3, 4, 3, 2, 1),
        ConvSpec::new(4, 6, 1, 1, 0),
        ConvSpec::new(4, 6, 1, 2, 0),
        ConvSpec::depthwise(5, 3, 1, 1),
    ];
    for spec in specs {
        for (h, w) in [(6, 6), (7, 5), (8, 8)] {
            let x = Tensor::rand_uniform(&[2, spec.in_channels, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::rand_uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[spec.out_channels], -1.0, 1.0, &mut rng);
            let y = ops::conv2d(&x, &spec, &wt, Some(&b)).unwrap();
            assert!(
                y.approx_eq(&conv_oracle(&x, &spec, &wt, Some(&b)), 1e-6),
                "{spec:?} {h}x{w}"
            );
        }
    }
}

#[test]
fn conv_randomized_hundred_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let groups = if rng.random_bool(0.3) { 0 } else { 1 };
        let c = rng.random_range(1..4);
        let kernel = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let spec = if groups == 0 {
            ConvSpec::depthwise(c, kernel, stride, pad)
        } else {
            ConvSpec::new(c, rng.random_range(1..4), kernel, stride, pad)
        };
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        let x = Tensor::rand_uniform(&[rng.random_range(1..3), c, h, w], -2.0, 2.0, &mut rng);
        let wt = Tensor::rand_uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let y = ops::conv2d(&x, &spec, &wt, None).unwrap();
        assert!(y.approx_eq(&conv_oracle(&x, &spec, &wt, None), 1e-6));
    }
}

#[test]
fn max_pool_ramp() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64);
    let (y, _) = ops::pool2d(&x, &PoolSpec::max(2, 2)).unwrap();
    assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
}

#[test]
fn pool_of_constant_is_constant() {
    let x = Tensor::full(&[1, 2, 4, 6], 3.5);
    for spec in [
        PoolSpec::max(2, 2),
        PoolSpec::avg(2, 2),
        PoolSpec::avg(3, 1),
    ] {
        let (y, _) = ops::pool2d(&x, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
    }
}

#[test]
fn avg_pool_hand_mean() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let (y, _) = ops::pool2d(&x, &PoolSpec::avg(2, 2)).unwrap();
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn pool_randomized_hundred_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let size = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let spec = if rng.random_bool(0.5) {
            PoolSpec::max(size, stride)
        } else {
            PoolSpec::avg(size, stride)
        };
        let x = Tensor::rand_uniform(
            &[2, 2, rng.random_range(3..9), rng.random_range(3..9)],
            -1.0,
            1.0,
            &mut rng,
        );
        let (y, _) = ops::pool2d(&x, &spec).unwrap();
        assert!(y.approx_eq(&pool_oracle(&x, &spec), 1e-6));
    }
}

#[test]
fn max_pool_tie_routes_to_first() {
    let x = Tensor::full(&[1, 1, 2, 2], 1.0);
    let (_, arg) = ops::pool2d(&x, &PoolSpec::max(2, 2)).unwrap();
    assert_eq!(arg, vec![0]);
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let x = Tensor::full(&[2, 1, 3, 3], 5.0);
    let stats = NormStats::from_batch(&x, 1e-5).unwrap();
    let y = ops::batch_norm(&x, &stats).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_unit_variance_preserved() {
    let x = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
    let stats = NormStats::from_batch(&x, 0.0).unwrap();
    assert_eq!(ops::batch_norm(&x, &stats).unwrap().data(), &[-1.0, 1.0]);
}

#[test]
fn batch_norm_eps_dominated_denominator() {
    let x = Tensor::new(&[3, 1], vec![0.5, -0.25, 2.0]).unwrap();
    let stats = NormStats {
        mean: vec![0.1],
        var: vec![0.0],
        eps: 1e-5,
        scale: None,
        shift: None,
    };
    let y = ops::batch_norm(&x, &stats).unwrap();
    for (yv, xv) in y.data().iter().zip(x.data()) {
        assert!(yv.is_finite());
        assert!(yv.abs() <= (xv - 0.1).abs() / 1e-5f64.sqrt() + 1e-9);
    }
}

#[test]
fn batch_norm_rejects_negative_eps() {
    let x = Tensor::ones(&[2, 1]);
    let stats = NormStats::from_batch(&x, -1.0).unwrap();
    assert!(ops::batch_norm(&x, &stats).is_err());
}

#[test]
fn layer_norm_cases() {
    let y = ops::layer_norm(&Tensor::ones(&[1, 4]), None, None, 1e-5).unwrap();
    assert_eq!(y.data(), &[0.0; 4]);
    let y = ops::layer_norm(
        &Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap(),
        None,
        None,
        1e-12,
    )
    .unwrap();
    assert!(y.approx_eq(&Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap(), 1e-9));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::rand_uniform(&[5, 7], -3.0, 3.0, &mut rng);
    let y = ops::layer_norm(&x, None, None, 1e-5).unwrap();
    for row in y.data().chunks(7) {
        let m = row.iter().sum::<f64>() / 7.0;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 7.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn softmax_cases() {
    let y = ops::softmax(&Tensor::zeros(&[1, 5]));
    assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let x = Tensor::new(&[1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
    let y = ops::softmax(&x);
    assert!(y.approx_eq(
        &Tensor::new(&[1, 3], vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]).unwrap(),
        1e-12
    ));
}

#[test]
fn softmax_large_logits_stay_finite() {
    let x = Tensor::new(&[1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
    let y = ops::softmax(&x);
    assert!(y.is_finite());
    assert!((y.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn gelu_values() {
    let y = ops::gelu(&Tensor::new(&[3], vec![0.0, 10.0, 1.0]).unwrap());
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-6);
    // Phi(1) = 0.5 * (1 + erf(1/sqrt 2)) = 0.8413447460685429
    assert!((y.data()[2] - 0.841_344_746_068_542_9).abs() < 1e-6);
}

#[test]
fn matmul_cases() {
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
    assert_eq!(ops::matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    assert_eq!(ops::matmul(&a, &Tensor::eye(2)).unwrap(), a);
    assert!(ops::matmul(&b, &b).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
    let lhs = ops::matmul(&a, &b).unwrap().t().unwrap();
    let rhs = ops::matmul(&b.t().unwrap(), &a.t().unwrap()).unwrap();
    assert!(lhs.approx_eq(&rhs, 1e-12));
}

#[test]
fn concat_channel_cases() {
    let a = Tensor::zeros(&[1, 64, 2, 2]);
    let b = Tensor::ones(&[1, 128, 2, 2]);
    assert_eq!(ops::concat_channels(&[&a, &b]).unwrap().dim(1), 192);
    assert_eq!(ops::concat_channels(&[&a]).unwrap(), a);
    let bad = Tensor::ones(&[1, 3, 3, 2]);
    assert!(ops::concat_channels(&[&a, &bad]).is_err());
}
