use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfme_core::branches::{ResidualBranch, SpatialBranch};
use rsfme_core::{Ctx, Mode, ParamStore};
use rsfme_tensor::{Graph, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---- loop oracles -------------------------------------------------------

fn conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for r in 0..oh {
                for c in 0..ow {
                    let mut s = 0.0;
                    for i in 0..ci {
                        for kr in 0..k {
                            for kc in 0..k {
                                let y = (r * stride + kr) as isize - pad as isize;
                                let xx = (c * stride + kc) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    s += x.at(&[b, i, y as usize, xx as usize])
                                        * w.at(&[o, i, kr, kc]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, r, c], s);
                }
            }
        }
    }
    out
}

fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h).flat_map(move |r| (0..w).map(move |q| (b, r, q))))
            .map(|(b, r, q)| x.at(&[b, ch, r, q]))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for r in 0..h {
                for q in 0..w {
                    let z = (x.at(&[b, ch, r, q]) - m) / (v + eps).sqrt();
                    out.set(&[b, ch, r, q], gamma.data()[ch] * z + beta.data()[ch]);
                }
            }
        }
    }
    out
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn pool(x: &Tensor, max: bool) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
    for b in 0..n {
        for ch in 0..c {
            for r in 0..h / 2 {
                for q in 0..w / 2 {
                    let v = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dr, dq)| x.at(&[b, ch, 2 * r + dr, 2 * q + dq]));
                    let p = if max {
                        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        v.iter().sum::<f64>() / 4.0
                    };
                    out.set(&[b, ch, r, q], p);
                }
            }
        }
    }
    out
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y).unwrap()
}

fn randomize_bn(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta"))
        .map(str::to_string)
        .collect();
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n).unwrap().shape().to_vec();
        store
            .set(n, random(&shape, seed + i as u64).map(|v| 1.0 + 0.5 * v))
            .unwrap();
    }
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

// ---- residual -----------------------------------------------------------

#[test]
fn residual_branch_matches_loop_composition() {
    let (branch, mut store) = ResidualBranch::build(32, &[8, 12, 20, 32], 4, 1).unwrap();
    randomize_bn(&mut store, 50);
    let x = random(&[2, 3, 32, 32], 2);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, 0);
    let xv = ctx.g.constant(x.clone());
    let y = branch.forward(&mut ctx, xv).unwrap();
    let got = ctx.g.value(y).clone();

    let p = |n: &str| store.get(n).unwrap();
    let eps = 1e-5;
    let mut h = conv(&x, p("residual.stem.conv.weight"), 2, 1);
    h = relu(&batch_norm(
        &h,
        p("residual.stem.bn.gamma"),
        p("residual.stem.bn.beta"),
        eps,
    ));
    h = pool(&h, true);
    for (i, b) in branch.blocks.iter().enumerate() {
        let q = |s: &str| p(&format!("residual.blocks.{i}.{s}"));
        let mut f = conv(&h, q("p.conv.weight"), b.stride, 1);
        f = relu(&batch_norm(&f, q("p.bn.gamma"), q("p.bn.beta"), eps));
        f = conv(&f, q("q.conv.weight"), 1, 1);
        f = batch_norm(&f, q("q.bn.gamma"), q("q.bn.beta"), eps);
        let skip = if b.proj.is_some() {
            conv(&h, q("proj.weight"), b.stride, 0)
        } else {
            h.clone()
        };
        h = relu(&add(&f, &skip));
    }
    close(&got, &h, 1e-6);
    assert_eq!(got.shape(), &[2, 32, 4, 4]);
}

#[test]
fn identity_block_with_zero_residual_is_relu_of_input() {
    let (branch, mut store) = ResidualBranch::build(16, &[4, 4, 4, 4], 4, 3).unwrap();
    let block = &branch.blocks[1];
    assert!(block.proj.is_none());
    store
        .set("residual.blocks.1.q.bn.gamma", Tensor::zeros(&[4]))
        .unwrap();
    store
        .set("residual.blocks.1.q.bn.beta", Tensor::zeros(&[4]))
        .unwrap();
    let x = random(&[2, 4, 4, 4], 4);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, mode, 0);
        let xv = ctx.g.constant(x.clone());
        let y = block.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.g.value(y), &relu(&x));
    }
}

#[test]
fn block_projection_is_one_by_one() {
    let (branch, store) = ResidualBranch::build(224, &[64, 96, 160, 256], 14, 0).unwrap();
    let b = &branch.blocks[1];
    assert_eq!((b.in_channels, b.out_channels), (64, 96));
    let proj = b.proj.as_ref().unwrap();
    assert_eq!(store.get(&proj.weight).unwrap().shape(), &[96, 64, 1, 1]);
    let strides: Vec<usize> = branch.blocks.iter().map(|b| b.stride).collect();
    assert_eq!(strides, vec![2, 2, 1, 1]);
    assert_eq!(branch.out_channels(), 256);
}

#[test]
fn residual_branch_geometry_errors_are_reported() {
    assert!(ResidualBranch::build(224, &[64, 96, 160, 256], 5, 0).is_err());
    assert!(ResidualBranch::build(224, &[], 14, 0).is_err());
}

// ---- spatial ------------------------------------------------------------

#[test]
fn spatial_branch_matches_loop_composition() {
    let (branch, mut store) = SpatialBranch::build(32, &[4, 8, 12, 16, 20], 4, 5).unwrap();
    randomize_bn(&mut store, 70);
    assert_eq!(branch.upsample, 4);
    let x = random(&[2, 3, 32, 32], 6);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, 0);
    let xv = ctx.g.constant(x.clone());
    let raw = branch.forward_unaligned(&mut ctx, xv).unwrap();
    let up = branch.forward(&mut ctx, xv).unwrap();
    let (raw, up) = (ctx.g.value(raw).clone(), ctx.g.value(up).clone());

    let p = |n: &str| store.get(n).unwrap();
    let mut h = x.clone();
    for i in 0..5 {
        let q = |s: &str| p(&format!("spatial.blocks.{i}.{s}"));
        h = relu(&batch_norm(
            &conv(&h, q("conv.weight"), 1, 1),
            q("bn.gamma"),
            q("bn.beta"),
            1e-5,
        ));
        h = if i == 4 {
            pool(&h, true)
                .zip_map(&pool(&h, false), |a, b| (a + b) / 2.0)
                .unwrap()
        } else {
            pool(&h, true)
        };
    }
    close(&raw, &h, 1e-6);
    assert_eq!(up.shape(), &[2, 20, 4, 4]);
    for b in 0..2 {
        for c in 0..20 {
            for r in 0..4 {
                for q in 0..4 {
                    assert_eq!(up.at(&[b, c, r, q]), raw.at(&[b, c, r / 4, q / 4]));
                }
            }
        }
    }
}

#[test]
fn full_spatial_branch_upsamples_seven_to_fourteen() {
    let (branch, _) = SpatialBranch::build(224, &[32, 64, 96, 128, 160], 14, 0).unwrap();
    assert_eq!(branch.upsample, 2);
    assert_eq!(branch.out_channels(), 160);
    assert!(branch.blocks.last().unwrap().merge_avg);
    assert!(branch.blocks[..4].iter().all(|b| !b.merge_avg));
}

#[test]
fn merge_of_constant_map_is_the_constant() {
    let (branch, mut store) = SpatialBranch::build(32, &[4, 8, 12, 16, 20], 4, 7).unwrap();
    // last block: zero conv weights and beta = 0.75 give a constant post-ReLU map
    store
        .set(
            "spatial.blocks.4.conv.weight",
            Tensor::zeros(&[20, 16, 3, 3]),
        )
        .unwrap();
    store
        .set("spatial.blocks.4.bn.beta", Tensor::full(&[20], 0.75))
        .unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, 0);
    let x = ctx.g.constant(random(&[2, 16, 4, 4], 8));
    let y = branch.blocks[4].forward(&mut ctx, x).unwrap();
    let y = ctx.g.value(y);
    assert_eq!(y.shape(), &[2, 20, 2, 2]);
    assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
}

#[test]
fn spatial_block_rejects_odd_extents() {
    let (branch, store) = SpatialBranch::build(32, &[4, 8, 12, 16, 20], 4, 0).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Eval, 0);
    let x = ctx.g.constant(Tensor::zeros(&[1, 3, 5, 5]));
    assert!(branch.blocks[0].forward(&mut ctx, x).is_err());
}
