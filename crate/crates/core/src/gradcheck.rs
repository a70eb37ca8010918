//! Finite-difference gradient suite over the tape ops and the assembled
//! network blocks, shared by the test suites and the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfme_tensor::{
    grad_check, ConvSpec, GradCheckOptions, GradCheckReport, Graph, PoolSpec, Tensor, TensorError,
    Var,
};

use crate::branches::{ResidualBranch, SpatialBranch};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::fme::Model;
use crate::params::{Ctx, Mode, ParamStore};
use crate::swint::{AttentionConfig, BackboneConfig, PatchEmbedConfig, SwinBackbone, TokenLayout};

/// Relative-error bound for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for assembled blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Fixed random projection to a scalar, so every output element carries gradient.
fn readout(g: &mut Graph, y: Var, seed: u64) -> rsfme_tensor::Result<Var> {
    let r = uniform(g.value(y).shape(), seed);
    let p = g.mul_const(y, r)?;
    g.sum(p)
}

fn to_tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "forward",
            detail: other.to_string(),
        },
    }
}

fn op_case<F>(name: &str, inputs: &[Tensor], seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> rsfme_tensor::Result<Var> + Sync,
{
    let report = grad_check(
        |g, v| {
            let y = f(g, v)?;
            readout(g, y, seed)
        },
        inputs,
        &GradCheckOptions::with_tolerance(OP_TOLERANCE),
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        report,
    })
}

/// Every differentiable tape op on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let a = uniform(&[3, 4], s(1));
    let b = uniform(&[4, 2], s(2));
    let c = uniform(&[3, 4], s(3));
    let bias = uniform(&[4], s(4));
    let img = uniform(&[2, 3, 6, 6], s(5));
    let conv = ConvSpec::new(3, 4, 3, 2, 1);
    let dw = ConvSpec::depthwise(3, 3, 1, 1);
    let wconv = uniform(&conv.weight_shape(), s(6));
    let wdw = uniform(&dw.weight_shape(), s(7));
    let bconv = uniform(&[4], s(8));
    let gamma = uniform(&[3], s(9)).map(|v| 1.0 + 0.5 * v);
    let beta = uniform(&[3], s(10));
    let lgamma = uniform(&[4], s(11)).map(|v| 1.0 + 0.5 * v);
    let lbeta = uniform(&[4], s(12));
    let small = uniform(&[2, 3, 2, 2], s(13));
    let perm: Vec<usize> = (0..12).rev().collect();

    let mut out = vec![
        op_case("matmul", &[a.clone(), b], s(20), |g, v| {
            g.matmul(v[0], v[1])
        })?,
        op_case("add", &[a.clone(), c.clone()], s(21), |g, v| {
            g.add(v[0], v[1])
        })?,
        op_case("add_bias", &[a.clone(), bias], s(22), |g, v| {
            g.add_bias(v[0], v[1])
        })?,
        op_case("mul", &[a.clone(), c.clone()], s(23), |g, v| {
            g.mul(v[0], v[1])
        })?,
        op_case("scale", std::slice::from_ref(&a), s(24), |g, v| g.scale(v[0], -1.7))?,
        op_case("transpose", std::slice::from_ref(&a), s(25), |g, v| g.transpose(v[0]))?,
        op_case("conv2d", &[img.clone(), wconv, bconv], s(26), |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), conv)
        })?,
        op_case("conv2d_depthwise", &[img.clone(), wdw], s(27), |g, v| {
            g.conv2d(v[0], v[1], None, dw)
        })?,
        op_case("batch_norm", &[img.clone(), gamma, beta], s(28), |g, v| {
            Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        })?,
        op_case("layer_norm", &[a.clone(), lgamma, lbeta], s(29), |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        })?,
        op_case("max_pool", std::slice::from_ref(&img), s(30), |g, v| {
            g.pool2d(v[0], PoolSpec::max(2, 2))
        })?,
        op_case("avg_pool", std::slice::from_ref(&img), s(31), |g, v| {
            g.pool2d(v[0], PoolSpec::avg(2, 2))
        })?,
        op_case("softmax", std::slice::from_ref(&a), s(32), |g, v| g.softmax(v[0]))?,
        op_case("gelu", std::slice::from_ref(&a), s(33), |g, v| g.gelu(v[0]))?,
        op_case("relu", std::slice::from_ref(&a), s(34), |g, v| g.relu(v[0]))?,
        op_case("concat", &[a.clone(), c.clone()], s(35), |g, v| {
            g.concat(&[v[0], v[1]], 0)
        })?,
        op_case(
            "concat_channels",
            &[small.clone(), small.clone()],
            s(36),
            |g, v| g.concat_channels(&[v[0], v[1]]),
        )?,
        op_case("narrow", std::slice::from_ref(&a), s(37), |g, v| {
            g.narrow(v[0], 1, 1, 2)
        })?,
        op_case("gather_rows", std::slice::from_ref(&a), s(38), |g, v| {
            g.gather_rows(v[0], vec![2, 0, 2, 1])
        })?,
        op_case("permute", std::slice::from_ref(&a), s(39), |g, v| {
            g.permute(v[0], perm.clone(), &[4, 3])
        })?,
        op_case("reshape", std::slice::from_ref(&a), s(40), |g, v| {
            g.reshape(v[0], &[2, 6])
        })?,
        op_case("upsample_nearest", std::slice::from_ref(&small), s(41), |g, v| {
            g.upsample_nearest(v[0], 2)
        })?,
        op_case("global_avg_pool", &[small], s(42), |g, v| {
            g.global_avg_pool(v[0])
        })?,
    ];
    let labels = [2usize, 0, 3];
    let report = grad_check(
        |g, v| g.softmax_cross_entropy(v[0], &labels),
        &[a],
        &GradCheckOptions::with_tolerance(OP_TOLERANCE),
    )?;
    out.push(CheckResult {
        name: "softmax_cross_entropy".into(),
        report,
    });
    Ok(out)
}

/// Checks `f(input, params)` with respect to the input and every trainable
/// parameter in `store`, sampling `sample` elements when given.
pub fn block_case<F>(
    name: &str,
    store: &ParamStore,
    input: &Tensor,
    sample: Option<usize>,
    seed: u64,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Ctx, Var) -> Result<Var> + Sync,
{
    let names = store.trainable_names();
    let mut inputs = vec![input.clone()];
    for n in &names {
        inputs.push(store.get(n)?.clone());
    }
    let mut opts = GradCheckOptions::with_tolerance(BLOCK_TOLERANCE);
    if let Some(k) = sample {
        opts = opts.sampled(k, seed);
    }
    let report = grad_check(
        |g, v| {
            let bindings: Vec<(String, Var)> =
                names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let mut ctx = Ctx::new(g, store, Mode::Train, seed).with_bindings(bindings);
            let y = f(&mut ctx, v[0]).map_err(to_tensor_err)?;
            readout(ctx.g, y, seed ^ 0x5eed)
        },
        &inputs,
        &opts,
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        report,
    })
}

/// Backbone used for the block checks: 16×16 images, 4×4 patches, D = 8,
/// two heads, two blocks (the second shifted).
pub fn check_backbone_config() -> BackboneConfig {
    BackboneConfig {
        embed: PatchEmbedConfig {
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
            dim: 8,
        },
        attention: AttentionConfig {
            heads: 2,
            window: 2,
            shift: 1,
        },
        depth: 2,
        eps: 1e-5,
    }
}

/// Restricts a store to the parameters whose names start with one of `prefixes`.
fn subset(store: &ParamStore, prefixes: &[&str]) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, e) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name, e.value.clone(), e.trainable)?;
        }
    }
    Ok(out)
}

/// Each assembled block, then the whole tiny classifier with a sampled
/// `model_fraction` of its parameters.
pub fn block_suite(seed: u64, model_fraction: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let cfg = check_backbone_config();
    let (backbone, store) = SwinBackbone::build(cfg, seed)?;
    let layout = TokenLayout {
        images: 2,
        grid: backbone.grid(),
    };
    let tokens = uniform(&[layout.rows(), cfg.embed.dim], seed ^ 1);
    for (i, block) in backbone.blocks.iter().enumerate() {
        let prefix = format!("swint.blocks.{i}.");
        let bstore = subset(&store, &[&prefix])?;
        let tag = if block.shifted { "shifted" } else { "regular" };
        let attn = subset(
            &store,
            &[&format!("{prefix}norm1"), &format!("{prefix}attn")],
        )?;
        out.push(block_case(
            &format!("mha_block[{tag}]"),
            &attn,
            &tokens,
            None,
            seed,
            |ctx, x| block.mha_block(ctx, x, layout),
        )?);
        let irb = subset(&store, &[&format!("{prefix}irb")])?;
        let h = uniform(&[layout.rows(), cfg.embed.dim], seed ^ 2);
        out.push(block_case(
            &format!("irb[{tag}]"),
            &irb,
            &h,
            None,
            seed,
            |ctx, x| block.irb.forward(ctx, x, layout),
        )?);
        out.push(block_case(
            &format!("transformer_block[{tag}]"),
            &bstore,
            &tokens,
            None,
            seed,
            |ctx, x| block.forward(ctx, x, layout),
        )?);
    }
    let images = uniform(&[2, 3, 16, 16], seed ^ 3);
    out.push(block_case(
        "patch_embed",
        &subset(&store, &["swint.embed"])?,
        &images,
        None,
        seed,
        |ctx, x| backbone.embed.forward(ctx, x),
    )?);

    // a strided block with a projected skip, and an identity-skip block
    let (strided, s_store) = ResidualBranch::build(32, &[8, 12, 20, 32], 4, seed)?;
    let (plain, p_store) = ResidualBranch::build(16, &[4, 4, 4, 4], 4, seed)?;
    for (name, branch, bstore, x) in [
        (
            "residual_block[projected]",
            &strided,
            &s_store,
            uniform(&[2, 8, 8, 8], seed ^ 4),
        ),
        (
            "residual_block[identity]",
            &plain,
            &p_store,
            uniform(&[2, 4, 4, 4], seed ^ 5),
        ),
    ] {
        let block = &branch.blocks[0];
        let bstore = subset(bstore, &["residual.blocks.0."])?;
        out.push(block_case(name, &bstore, &x, None, seed, |ctx, x| {
            block.forward(ctx, x)
        })?);
    }

    let (sp, sstore) = SpatialBranch::build(32, &[4, 8, 12, 16, 20], 4, seed)?;
    let first = uniform(&[2, 3, 8, 8], seed ^ 6);
    out.push(block_case(
        "spatial_block[max]",
        &subset(&sstore, &["spatial.blocks.0."])?,
        &first,
        None,
        seed,
        |ctx, x| sp.blocks[0].forward(ctx, x),
    )?);
    let last = uniform(&[2, 16, 4, 4], seed ^ 7);
    out.push(block_case(
        "spatial_block[max+avg]",
        &subset(&sstore, &["spatial.blocks.4."])?,
        &last,
        None,
        seed,
        |ctx, x| sp.blocks[4].forward(ctx, x),
    )?);

    let mcfg = ModelConfig {
        variant: Variant::Full,
        ..ModelConfig::tiny()
    };
    let (model, mstore) = Model::build(&mcfg, seed)?;
    let images = Tensor::rand_uniform(
        &[2, 3, mcfg.image_size, mcfg.image_size],
        0.0,
        1.0,
        &mut rng(seed ^ 8),
    );
    let total = mstore.num_trainable() + images.numel();
    let sample = ((total as f64 * model_fraction).ceil() as usize).clamp(1, total);
    out.push(block_case(
        "tiny_model",
        &mstore,
        &images,
        Some(sample),
        seed,
        |ctx, x| model.logits(ctx, x),
    )?);
    Ok(out)
}
