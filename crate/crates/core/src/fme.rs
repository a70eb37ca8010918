//! Feature-map fusion of the backbone and branch outputs, the classification
//! head, and assembly of the four model variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfme_tensor::{ops, Graph, Tensor, Var};

use crate::branches::{ResidualBranch, SpatialBranch};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, Init, Mode, ParamStore};
use crate::swint::{BackboneConfig, SwinBackbone};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    SwinT,
    Residual,
    Spatial,
}

/// Channel-concatenates the active feature maps in the order SwinT, residual,
/// spatial. All maps must share batch size and grid.
pub fn fuse(g: &mut Graph, swint: Var, residual: Option<Var>, spatial: Option<Var>) -> Result<Var> {
    let parts: Vec<Var> = std::iter::once(swint)
        .chain(residual)
        .chain(spatial)
        .collect();
    let reference = g.value(swint).shape().to_vec();
    if reference.len() != 4 {
        return Err(Error::Config(format!(
            "feature map must be [N, C, H, W], got {reference:?}"
        )));
    }
    for &p in &parts[1..] {
        let s = g.value(p).shape();
        if s.len() != 4 || s[0] != reference[0] || s[2..] != reference[2..] {
            return Err(Error::Config(format!(
                "grid mismatch: branch map {s:?} against backbone map {reference:?}"
            )));
        }
    }
    if parts.len() == 1 {
        return Ok(swint);
    }
    Ok(g.concat_channels(&parts)?)
}

/// Fully connected head over pooled features.
#[derive(Clone, Debug)]
pub struct Head {
    pub fc: Linear,
    pub dropout: f64,
}

impl Head {
    /// Global average pool, dropout (training only), linear map. Returns logits.
    pub fn logits(&self, ctx: &mut Ctx, boosted: Var) -> Result<Var> {
        let pooled = ctx.g.global_avg_pool(boosted)?;
        self.logits_from_pooled(ctx, pooled)
    }

    pub fn logits_from_pooled(&self, ctx: &mut Ctx, pooled: Var) -> Result<Var> {
        let mut h = pooled;
        if ctx.training() && self.dropout > 0.0 {
            let shape = ctx.g.value(h).shape().to_vec();
            let mask = ctx.dropout_mask(&shape, self.dropout);
            h = ctx.g.mul_const(h, mask)?;
        }
        self.fc.forward(ctx, h)
    }

    /// Class probabilities, one row per image.
    pub fn classify(&self, ctx: &mut Ctx, boosted: Var) -> Result<Var> {
        let logits = self.logits(ctx, boosted)?;
        Ok(ctx.g.softmax(logits)?)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub swint: SwinBackbone,
    pub residual: Option<ResidualBranch>,
    pub spatial: Option<SpatialBranch>,
    pub head: Head,
}

impl Model {
    /// Builds the configured variant with parameters drawn from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let bcfg = BackboneConfig::from_model(cfg);
        let swint = SwinBackbone::new(&mut store, &mut init, "swint", bcfg)?;
        let residual = if cfg.variant.has_residual() {
            Some(ResidualBranch::new(
                &mut store,
                &mut init,
                "residual",
                cfg.image_size,
                cfg.channels,
                &cfg.residual_channels,
                cfg.fusion_grid,
                cfg.norm_eps,
            )?)
        } else {
            None
        };
        let spatial = if cfg.variant.has_spatial() {
            Some(SpatialBranch::new(
                &mut store,
                &mut init,
                "spatial",
                cfg.image_size,
                cfg.channels,
                &cfg.spatial_channels,
                cfg.fusion_grid,
                cfg.norm_eps,
            )?)
        } else {
            None
        };
        let total = cfg.dim
            + residual.as_ref().map_or(0, ResidualBranch::out_channels)
            + spatial.as_ref().map_or(0, SpatialBranch::out_channels);
        let fc = Linear::new(&mut store, &mut init, "head.fc", total, cfg.classes)?;
        let model = Self {
            cfg: cfg.clone(),
            swint,
            residual,
            spatial,
            head: Head {
                fc,
                dropout: cfg.dropout,
            },
        };
        Ok((model, store))
    }

    /// Channel count contributed by each active branch, in fusion order.
    pub fn branch_channels(&self) -> Vec<(Branch, usize)> {
        let mut out = vec![(Branch::SwinT, self.cfg.dim)];
        if let Some(r) = &self.residual {
            out.push((Branch::Residual, r.out_channels()));
        }
        if let Some(s) = &self.spatial {
            out.push((Branch::Spatial, s.out_channels()));
        }
        out
    }

    pub fn fused_channels(&self) -> usize {
        self.branch_channels().iter().map(|(_, c)| c).sum()
    }

    /// The fused feature map `[N, C_total, g, g]`.
    pub fn boosted(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let s = self.swint.forward(ctx, images)?;
        let r = match &self.residual {
            Some(b) => Some(b.forward(ctx, images)?),
            None => None,
        };
        let sp = match &self.spatial {
            Some(b) => Some(b.forward(ctx, images)?),
            None => None,
        };
        fuse(ctx.g, s.grid, r, sp)
    }

    /// Pooled fused features `[N, C_total]`, the input of the head.
    pub fn features(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let b = self.boosted(ctx, images)?;
        Ok(ctx.g.global_avg_pool(b)?)
    }

    pub fn logits(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let f = self.features(ctx, images)?;
        self.head.logits_from_pooled(ctx, f)
    }

    /// Eval-mode forward returning `(pooled features, probabilities)`.
    pub fn infer(&self, store: &ParamStore, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, Mode::Eval, 0);
        let x = ctx.g.constant(images.clone());
        let f = self.features(&mut ctx, x)?;
        let logits = self.head.logits_from_pooled(&mut ctx, f)?;
        let features = ctx.g.value(f).clone();
        let probs = ops::softmax(ctx.g.value(logits));
        Ok((features, probs))
    }

    pub fn predict_proba(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        Ok(self.infer(store, images)?.1)
    }
}

/// Builds a named variant on top of the widths and geometry in `base`.
pub fn build_variant(name: &str, base: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
    let variant: Variant = name.parse()?;
    let cfg = ModelConfig {
        variant,
        ..base.clone()
    };
    Model::build(&cfg, seed)
}
