//! Convolutional side branches: a residual-learning stack and a spatial
//! conv/pool stack, both ending on the backbone's token grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfme_tensor::{ConvSpec, PoolSpec, Var};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv};
use crate::params::{Ctx, Init, ParamStore};

/// Two 3×3 conv/batch-norm layers (`p`, `q`) plus an optional 1×1 projection
/// on the skip path when channels or stride change.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub p: Conv,
    pub p_bn: BatchNorm,
    pub q: Conv,
    pub q_bn: BatchNorm,
    pub proj: Option<Conv>,
}

impl ResidualBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        eps: f64,
    ) -> Result<Self> {
        let proj = if in_channels != out_channels || stride != 1 {
            Some(Conv::new(
                store,
                init,
                &format!("{prefix}.proj"),
                ConvSpec::new(in_channels, out_channels, 1, stride, 0),
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            in_channels,
            out_channels,
            stride,
            p: Conv::new(
                store,
                init,
                &format!("{prefix}.p.conv"),
                ConvSpec::new(in_channels, out_channels, 3, stride, 1),
                false,
            )?,
            p_bn: BatchNorm::new(store, &format!("{prefix}.p.bn"), out_channels, eps)?,
            q: Conv::new(
                store,
                init,
                &format!("{prefix}.q.conv"),
                ConvSpec::new(out_channels, out_channels, 3, 1, 1),
                false,
            )?,
            q_bn: BatchNorm::new(store, &format!("{prefix}.q.bn"), out_channels, eps)?,
            proj,
        })
    }

    /// The residual function `F(x)` alone.
    pub fn residual(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.p.forward(ctx, x)?;
        let h = self.p_bn.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        let h = self.q.forward(ctx, h)?;
        self.q_bn.forward(ctx, h)
    }

    /// `relu(F(x) + x)`, or `relu(F(x) + W_s x)` with the projection.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let f = self.residual(ctx, x)?;
        let skip = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let y = ctx.g.add(f, skip)?;
        Ok(ctx.g.relu(y)?)
    }
}

fn conv_extent(e: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (e + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Stem (stride-2 conv, batch norm, ReLU, 2×2 max-pool) and four residual
/// blocks. The first blocks use stride 2 until the grid reaches the fusion
/// grid; the remaining blocks keep their input extent.
#[derive(Clone, Debug)]
pub struct ResidualBranch {
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResidualBlock>,
}

impl ResidualBranch {
    /// Number of leading stride-2 blocks that lands `image` on `grid`.
    pub fn downsampling_blocks(image: usize, grid: usize, blocks: usize) -> Result<usize> {
        let after_stem = conv_extent(image, 3, 2, 1).map(|e| e / 2).unwrap_or(0);
        let mut e = after_stem;
        for k in 0..blocks {
            if e == grid {
                return Ok(k);
            }
            e = conv_extent(e, 3, 2, 1).unwrap_or(0);
        }
        Err(Error::Config(format!(
            "residual branch cannot reach a {grid}x{grid} grid from {image}x{image} images \
             (stem gives {after_stem}, at most {} stride-2 blocks)",
            blocks - 1
        )))
    }

    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        image: usize,
        in_channels: usize,
        channels: &[usize],
        grid: usize,
        eps: f64,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config(
                "residual branch needs at least one block".into(),
            ));
        }
        let strided = Self::downsampling_blocks(image, grid, channels.len())?;
        let stem = Conv::new(
            store,
            init,
            &format!("{prefix}.stem.conv"),
            ConvSpec::new(in_channels, channels[0], 3, 2, 1),
            false,
        )?;
        let stem_bn = BatchNorm::new(store, &format!("{prefix}.stem.bn"), channels[0], eps)?;
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = channels[0];
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i < strided { 2 } else { 1 };
            blocks.push(ResidualBlock::new(
                store,
                init,
                &format!("{prefix}.blocks.{i}"),
                c_in,
                c,
                stride,
                eps,
            )?);
            c_in = c;
        }
        Ok(Self {
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn build(
        image: usize,
        channels: &[usize],
        grid: usize,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Self::new(
            &mut store,
            &mut Init { rng: &mut rng },
            "residual",
            image,
            3,
            channels,
            grid,
            1e-5,
        )?;
        Ok((b, store))
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let h = self.stem.forward(ctx, images)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        let mut h = ctx.g.pool2d(h, PoolSpec::max(2, 2))?;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// 3×3 conv, batch norm, ReLU and a 2×2 stride-2 max-pool. The final block
/// of the branch also takes a 2×2 average pool and averages the two.
#[derive(Clone, Debug)]
pub struct SpatialBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub merge_avg: bool,
}

impl SpatialBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        merge_avg: bool,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(
                store,
                init,
                &format!("{prefix}.conv"),
                ConvSpec::new(in_channels, out_channels, 3, 1, 1),
                false,
            )?,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), out_channels, eps)?,
            merge_avg,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.g.value(x).shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial block needs even extents, got {s:?}"
            )));
        }
        let h = self.conv.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        let max = ctx.g.pool2d(h, PoolSpec::max(2, 2))?;
        if !self.merge_avg {
            return Ok(max);
        }
        let avg = ctx.g.pool2d(h, PoolSpec::avg(2, 2))?;
        let sum = ctx.g.add(max, avg)?;
        Ok(ctx.g.scale(sum, 0.5)?)
    }
}

#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub blocks: Vec<SpatialBlock>,
    /// Nearest-neighbour factor taking the last block's grid to the fusion grid.
    pub upsample: usize,
}

impl SpatialBranch {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        image: usize,
        in_channels: usize,
        channels: &[usize],
        grid: usize,
        eps: f64,
    ) -> Result<Self> {
        let halvings = channels.len();
        if halvings == 0 || !image.is_multiple_of(1 << halvings) {
            return Err(Error::Config(format!(
                "{image}x{image} images cannot be halved {halvings} times"
            )));
        }
        let out = image >> halvings;
        if !grid.is_multiple_of(out) {
            return Err(Error::Config(format!(
                "spatial branch output {out}x{out} does not upsample to the {grid}x{grid} fusion grid"
            )));
        }
        let mut blocks = Vec::with_capacity(halvings);
        let mut c_in = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(SpatialBlock::new(
                store,
                init,
                &format!("{prefix}.blocks.{i}"),
                c_in,
                c,
                i + 1 == halvings,
                eps,
            )?);
            c_in = c;
        }
        Ok(Self {
            blocks,
            upsample: grid / out,
        })
    }

    pub fn build(
        image: usize,
        channels: &[usize],
        grid: usize,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Self::new(
            &mut store,
            &mut Init { rng: &mut rng },
            "spatial",
            image,
            3,
            channels,
            grid,
            1e-5,
        )?;
        Ok((b, store))
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.bn.channels)
    }

    /// Output before alignment to the fusion grid.
    pub fn forward_unaligned(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let mut h = images;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let h = self.forward_unaligned(ctx, images)?;
        if self.upsample == 1 {
            return Ok(h);
        }
        Ok(ctx.g.upsample_nearest(h, self.upsample)?)
    }
}
