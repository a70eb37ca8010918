//! Parameterised layers. Each layer only records parameter names; values live
//! in a [`ParamStore`] and are bound per forward through a [`Ctx`].

use rsfme_tensor::{ConvSpec, Tensor, Var};

use crate::error::Result;
use crate::params::{Ctx, Init, NormUpdate, ParamStore};

/// Standard deviation of the truncated-normal init for linear projections.
pub const PROJ_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.insert(
            &weight,
            init.trunc_normal(&[in_dim, out_dim], PROJ_STD),
            true,
        )?;
        store.insert(&bias, Tensor::zeros(&[out_dim]), true)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    /// `x` is `[rows, in_dim]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let y = ctx.g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = ctx.param(b)?;
                Ok(ctx.g.add_bias(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: String,
    pub bias: Option<String>,
}

impl Conv {
    /// He-normal weights; a bias only when `bias` is set (convolutions
    /// feeding a batch norm carry none).
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let weight = format!("{prefix}.weight");
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        store.insert(&weight, init.he_normal(&shape, fan_in), true)?;
        let bias = if bias {
            let name = format!("{prefix}.bias");
            store.insert(&name, Tensor::zeros(&[spec.out_channels]), true)?;
            Some(name)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(ctx.param(b)?),
            None => None,
        };
        Ok(ctx.g.conv2d(x, w, b, self.spec)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        eps: f64,
    ) -> Result<Self> {
        store.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), true)?;
        store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?;
        store.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        )?;
        store.insert(
            format!("{prefix}.running_var"),
            Tensor::ones(&[channels]),
            false,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            eps,
        })
    }

    /// Normalises over every axis except axis 1. Training mode uses batch
    /// statistics and records them; eval mode uses the running averages.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let gamma = ctx.param(&format!("{p}.gamma"))?;
        let beta = ctx.param(&format!("{p}.beta"))?;
        if ctx.training() {
            let (y, mean, var) = ctx.g.batch_norm_train(x, gamma, beta, self.eps)?;
            let count = ctx.g.value(x).numel() / self.channels;
            ctx.record_norm(NormUpdate {
                prefix: p.clone(),
                mean,
                var,
                count,
            });
            Ok(y)
        } else {
            let mean = ctx.buffer(&format!("{p}.running_mean"))?;
            let var = ctx.buffer(&format!("{p}.running_var"))?;
            Ok(ctx
                .g
                .batch_norm_eval(x, gamma, beta, mean.data(), var.data(), self.eps)?)
        }
    }
}

/// Folds recorded batch statistics into the running averages:
/// `r <- (1 - m) r + m b`, with the unbiased batch variance.
pub fn apply_norm_updates(
    store: &mut ParamStore,
    updates: &[NormUpdate],
    momentum: f64,
) -> Result<()> {
    for u in updates {
        let mean_name = format!("{}.running_mean", u.prefix);
        let var_name = format!("{}.running_var", u.prefix);
        let correction = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        let rm = store.get(&mean_name)?;
        let rm = Tensor::new(
            rm.shape(),
            rm.data()
                .iter()
                .zip(&u.mean)
                .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                .collect(),
        )?;
        let rv = store.get(&var_name)?;
        let rv = Tensor::new(
            rv.shape(),
            rv.data()
                .iter()
                .zip(&u.var)
                .map(|(r, b)| (1.0 - momentum) * r + momentum * b * correction)
                .collect(),
        )?;
        store.set(&mean_name, rm)?;
        store.set(&var_name, rv)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]), true)?;
        store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            eps,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.prefix))?;
        let beta = ctx.param(&format!("{}.beta", self.prefix))?;
        Ok(ctx.g.layer_norm(x, gamma, beta, self.eps)?)
    }
}
