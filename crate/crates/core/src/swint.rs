//! Windowed-attention transformer backbone with an inverted-residual feed-forward.
//!
//! Tokens for a batch of `N` images are kept as one `[N * (T + 1), D]` matrix,
//! image-major, with the class token first in each image's block of rows and
//! the `T = g * g` grid tokens following in row-major grid order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfme_tensor::{ops, ConvSpec, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, LayerNorm, Linear, PROJ_STD};
use crate::params::{Ctx, Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch size {} does not divide image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.dim == 0 || self.channels == 0 {
            return Err(Error::Config(
                "embedding dim and channels must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Length of one flattened patch, `P * P * C`.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Flat source indices that cut `[N, C, H, W]` images into `[N * Np, P * P * C]`
/// patch rows: patches row-major over the patch grid, and within a patch
/// pixels row-major with the channel innermost.
pub fn patch_indices(n: usize, cfg: &PatchEmbedConfig) -> Vec<usize> {
    let (c, h, w, p) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for pr in 0..cfg.grid_h() {
            for pc in 0..cfg.grid_w() {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            idx.push(((b * c + ch) * h + pr * p + py) * w + pc * p + px);
                        }
                    }
                }
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: String,
    pub cls: String,
    pub pos: String,
}

impl PatchEmbed {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: PatchEmbedConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let proj = format!("{prefix}.proj.weight");
        let cls = format!("{prefix}.cls");
        let pos = format!("{prefix}.pos");
        store.insert(
            &proj,
            init.trunc_normal(&[cfg.patch_len(), cfg.dim], PROJ_STD),
            true,
        )?;
        store.insert(&cls, init.trunc_normal(&[1, cfg.dim], PROJ_STD), true)?;
        store.insert(&pos, Tensor::zeros(&[cfg.num_patches() + 1, cfg.dim]), true)?;
        Ok(Self {
            cfg,
            proj,
            cls,
            pos,
        })
    }

    /// `[N, C, H, W]` images to `[N * (Np + 1), D]` tokens.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = ctx.g.value(images).shape().to_vec();
        if shape.len() != 4
            || shape[1] != cfg.channels
            || shape[2] != cfg.height
            || shape[3] != cfg.width
        {
            return Err(Error::Config(format!(
                "image batch {shape:?} does not match geometry {}x{}x{}",
                cfg.channels, cfg.height, cfg.width
            )));
        }
        let n = shape[0];
        let np = cfg.num_patches();
        let patches = ctx
            .g
            .permute(images, patch_indices(n, cfg), &[n * np, cfg.patch_len()])?;
        let e = ctx.param(&self.proj)?;
        let projected = ctx.g.matmul(patches, e)?;
        let cls = ctx.param(&self.cls)?;
        let stacked = ctx.g.concat(&[cls, projected], 0)?;
        let mut rows = Vec::with_capacity(n * (np + 1));
        for b in 0..n {
            rows.push(0);
            rows.extend((0..np).map(|i| 1 + b * np + i));
        }
        let tokens = ctx.g.gather_rows(stacked, rows)?;
        let pos = ctx.param(&self.pos)?;
        let tiled = ctx
            .g
            .gather_rows(pos, (0..n).flat_map(|_| 0..np + 1).collect())?;
        Ok(ctx.g.add(tokens, tiled)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

impl AttentionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide dim {dim}",
                self.heads
            )));
        }
        if self.window == 0 || self.shift >= self.window {
            return Err(Error::Config(format!(
                "need 0 <= shift < window, got shift {} window {}",
                self.shift, self.window
            )));
        }
        Ok(())
    }
}

/// Grid token indices (row-major, class token excluded) for each attention
/// window. When `shifted`, the grid is first rolled cyclically by `shift` in
/// both axes, so rolled position `(r, c)` holds token `((r + s) % g, (c + s) % g)`.
/// A grid that the window does not divide gets smaller windows along the
/// bottom and right edges.
pub fn window_indices(
    grid: usize,
    window: usize,
    shift: usize,
    shifted: bool,
) -> Result<Vec<Vec<usize>>> {
    if grid == 0 || window == 0 {
        return Err(Error::Config(format!(
            "cannot tile a {grid}x{grid} grid with window {window}"
        )));
    }
    let s = if shifted { shift % grid } else { 0 };
    let per_side = grid.div_ceil(window);
    let mut out = Vec::with_capacity(per_side * per_side);
    for wr in 0..per_side {
        for wc in 0..per_side {
            let mut w = Vec::with_capacity(window * window);
            for r in wr * window..((wr + 1) * window).min(grid) {
                for c in wc * window..((wc + 1) * window).min(grid) {
                    w.push(((r + s) % grid) * grid + (c + s) % grid);
                }
            }
            out.push(w);
        }
    }
    Ok(out)
}

fn square_side(t: usize) -> Result<usize> {
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t || t == 0 {
        return Err(Error::Config(format!(
            "{t} tokens do not form a square grid"
        )));
    }
    Ok(g)
}

/// Splits `[T, D]` grid tokens into per-window `[len, D]` blocks.
pub fn window_partition(
    tokens: &Tensor,
    cfg: &AttentionConfig,
    shifted: bool,
) -> Result<Vec<Tensor>> {
    let g = square_side(tokens.dim(0))?;
    window_indices(g, cfg.window, cfg.shift, shifted)?
        .iter()
        .map(|w| Ok(ops::gather_rows(tokens, w)?))
        .collect()
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &[Tensor],
    grid: usize,
    cfg: &AttentionConfig,
    shifted: bool,
) -> Result<Tensor> {
    let idx = window_indices(grid, cfg.window, cfg.shift, shifted)?;
    if windows.len() != idx.len() {
        return Err(Error::Config(format!(
            "expected {} windows, got {}",
            idx.len(),
            windows.len()
        )));
    }
    let d = windows.first().map_or(0, |w| w.dim(1));
    let mut out = Tensor::zeros(&[grid * grid, d.max(1)]);
    for (w, rows) in windows.iter().zip(&idx) {
        if w.dim(0) != rows.len() || w.dim(1) != d {
            return Err(Error::Config(format!(
                "window shape {:?} does not match {} tokens",
                w.shape(),
                rows.len()
            )));
        }
        for (i, &r) in rows.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&w.data()[i * d..(i + 1) * d]);
        }
    }
    Ok(out)
}

/// `softmax(Q Kᵀ / sqrt(d))`, one probability row per query.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1) || q.dim(1) == 0 {
        return Err(Error::Config(format!(
            "attention shapes {:?} and {:?} disagree",
            q.shape(),
            k.shape()
        )));
    }
    let scores = ops::matmul(q, &k.t()?)?;
    let scale = 1.0 / (q.dim(1) as f64).sqrt();
    Ok(ops::softmax(&scores.map(|s| s * scale)))
}

/// `softmax(Q Kᵀ / sqrt(d)) V`.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v.rank() != 2 || v.dim(0) != k.dim(0) {
        return Err(Error::Config(format!(
            "values {:?} do not match keys {:?}",
            v.shape(),
            k.shape()
        )));
    }
    Ok(ops::matmul(&attention_weights(q, k)?, v)?)
}

/// Unwindowed multi-head attention on one `[T, D]` sequence with `[D, D]`
/// projections and no biases.
pub fn multi_head_attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let d = x.dim(1);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} heads do not divide dim {d}"
        )));
    }
    let dk = d / heads;
    let (q, k, v) = (
        ops::matmul(x, wq)?,
        ops::matmul(x, wk)?,
        ops::matmul(x, wv)?,
    );
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let part = |t: &Tensor| ops::narrow(t, 1, h * dk, dk);
        outs.push(scaled_attention(&part(&q)?, &part(&k)?, &part(&v)?)?);
    }
    let cat = ops::concat(&outs.iter().collect::<Vec<_>>(), 1)?;
    Ok(ops::matmul(&cat, wo)?)
}

fn attend_on_tape(g: &mut Graph, q: Var, k: Var, v: Var, dk: usize) -> Result<Var> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt())?;
    let p = g.softmax(s)?;
    Ok(g.matmul(p, v)?)
}

/// Row layout of a token batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub images: usize,
    pub grid: usize,
}

impl TokenLayout {
    pub fn per_image(&self) -> usize {
        self.grid * self.grid + 1
    }

    pub fn rows(&self) -> usize {
        self.images * self.per_image()
    }

    fn check(&self, g: &Graph, x: Var, dim: usize) -> Result<()> {
        let s = g.value(x).shape();
        if s != [self.rows(), dim] {
            return Err(Error::Config(format!(
                "tokens {s:?} do not match layout {self:?} with dim {dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mha {
    pub cfg: AttentionConfig,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mha {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        Ok(Self {
            cfg,
            dim,
            q: Linear::new(store, init, &format!("{prefix}.q"), dim, dim)?,
            k: Linear::new(store, init, &format!("{prefix}.k"), dim, dim)?,
            v: Linear::new(store, init, &format!("{prefix}.v"), dim, dim)?,
            o: Linear::new(store, init, &format!("{prefix}.o"), dim, dim)?,
        })
    }

    /// Windowed attention over already-normalised tokens. Grid tokens attend
    /// within their window plus the class token; the class token attends to
    /// every token of its image.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        layout: TokenLayout,
        shifted: bool,
    ) -> Result<Var> {
        layout.check(ctx.g, x, self.dim)?;
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let windows = window_indices(layout.grid, self.cfg.window, self.cfg.shift, shifted)?;
        let per = layout.per_image();
        let mut pieces = Vec::new();
        let mut order = Vec::with_capacity(layout.rows());
        for b in 0..layout.images {
            let base = b * per;
            pieces.push(self.attend_rows(
                ctx,
                [q, k, v],
                vec![base],
                (base..base + per).collect(),
            )?);
            order.push(base);
            for w in &windows {
                let rows: Vec<usize> = w.iter().map(|t| base + 1 + t).collect();
                let mut keys = Vec::with_capacity(rows.len() + 1);
                keys.push(base);
                keys.extend_from_slice(&rows);
                pieces.push(self.attend_rows(ctx, [q, k, v], rows.clone(), keys)?);
                order.extend(rows);
            }
        }
        let cat = ctx.g.concat(&pieces, 0)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &r) in order.iter().enumerate() {
            inverse[r] = pos;
        }
        let merged = ctx.g.gather_rows(cat, inverse)?;
        self.o.forward(ctx, merged)
    }

    fn attend_rows(
        &self,
        ctx: &mut Ctx,
        [q, k, v]: [Var; 3],
        qrows: Vec<usize>,
        krows: Vec<usize>,
    ) -> Result<Var> {
        let g = &mut *ctx.g;
        let qw = g.gather_rows(q, qrows)?;
        let kw = g.gather_rows(k, krows.clone())?;
        let vw = g.gather_rows(v, krows)?;
        let heads = self.cfg.heads;
        let dk = self.dim / heads;
        if heads == 1 {
            return attend_on_tape(g, qw, kw, vw, dk);
        }
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.narrow(qw, 1, h * dk, dk)?;
            let kh = g.narrow(kw, 1, h * dk, dk)?;
            let vh = g.narrow(vw, 1, h * dk, dk)?;
            outs.push(attend_on_tape(g, qh, kh, vh, dk)?);
        }
        Ok(g.concat(&outs, 1)?)
    }
}

/// Expansion ratio of the inverted residual block.
pub const IRB_EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct Irb {
    pub dim: usize,
    pub expand: Linear,
    pub bn1: BatchNorm,
    pub dw: Conv,
    pub project: Linear,
    pub bn2: BatchNorm,
}

impl Irb {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        eps: f64,
    ) -> Result<Self> {
        let wide = IRB_EXPANSION * dim;
        Ok(Self {
            dim,
            expand: Linear::new(store, init, &format!("{prefix}.expand"), dim, wide)?,
            bn1: BatchNorm::new(store, &format!("{prefix}.bn1"), wide, eps)?,
            dw: Conv::new(
                store,
                init,
                &format!("{prefix}.dw"),
                ConvSpec::depthwise(wide, 3, 1, 1),
                true,
            )?,
            project: Linear::new(store, init, &format!("{prefix}.project"), wide, dim)?,
            bn2: BatchNorm::new(store, &format!("{prefix}.bn2"), dim, eps)?,
        })
    }

    pub fn width(&self) -> usize {
        IRB_EXPANSION * self.dim
    }

    /// Expand, GELU, batch norm, depthwise shortcut, project, batch norm.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, layout: TokenLayout) -> Result<Var> {
        layout.check(ctx.g, x, self.dim)?;
        let h = self.expand.forward(ctx, x)?;
        let h = ctx.g.gelu(h)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = self.shortcut(ctx, h, layout)?;
        let y = self.project.forward(ctx, h)?;
        self.bn2.forward(ctx, y)
    }

    /// `DWConv(h) + h` on the token grid; class-token rows pass through unchanged.
    pub fn shortcut(&self, ctx: &mut Ctx, h: Var, layout: TokenLayout) -> Result<Var> {
        let c = self.width();
        layout.check(ctx.g, h, c)?;
        let (n, g) = (layout.images, layout.grid);
        let grid = ctx.g.permute(h, rows_to_grid(n, g, c), &[n, c, g, g])?;
        let conv = self.dw.forward(ctx, grid)?;
        let conv_rows = ctx
            .g
            .permute(conv, grid_to_rows(n, g, c), &[n * g * g, c])?;
        let zero = ctx.g.constant(Tensor::zeros(&[1, c]));
        let padded = ctx.g.concat(&[zero, conv_rows], 0)?;
        let per = layout.per_image();
        let rows = (0..layout.rows())
            .map(|r| {
                let (b, t) = (r / per, r % per);
                if t == 0 {
                    0
                } else {
                    1 + b * g * g + t - 1
                }
            })
            .collect();
        let dw_full = ctx.g.gather_rows(padded, rows)?;
        Ok(ctx.g.add(dw_full, h)?)
    }
}

/// Source indices taking grid-token rows of `[N * (g² + 1), C]` to `[N, C, g, g]`.
pub fn rows_to_grid(n: usize, g: usize, c: usize) -> Vec<usize> {
    let per = g * g + 1;
    let mut idx = Vec::with_capacity(n * c * g * g);
    for b in 0..n {
        for ch in 0..c {
            for t in 0..g * g {
                idx.push((b * per + 1 + t) * c + ch);
            }
        }
    }
    idx
}

/// Source indices taking `[N, C, g, g]` to `[N * g², C]` rows.
fn grid_to_rows(n: usize, g: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * c * g * g);
    for b in 0..n {
        for t in 0..g * g {
            for ch in 0..c {
                idx.push((b * c + ch) * g * g + t);
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Mha,
    pub norm2: LayerNorm,
    pub irb: Irb,
    pub shifted: bool,
}

impl TransformerBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        cfg: AttentionConfig,
        shifted: bool,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim, eps)?,
            attn: Mha::new(store, init, &format!("{prefix}.attn"), dim, cfg)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim, eps)?,
            irb: Irb::new(store, init, &format!("{prefix}.irb"), dim, eps)?,
            shifted,
        })
    }

    /// `MHA(NORM(x)) + x`.
    pub fn mha_block(&self, ctx: &mut Ctx, x: Var, layout: TokenLayout) -> Result<Var> {
        let xn = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, xn, layout, self.shifted)?;
        Ok(ctx.g.add(a, x)?)
    }

    /// `IRB(NORM(m)) + m` with `m` the output of [`Self::mha_block`].
    pub fn forward(&self, ctx: &mut Ctx, x: Var, layout: TokenLayout) -> Result<Var> {
        let m = self.mha_block(ctx, x, layout)?;
        let mn = self.norm2.forward(ctx, m)?;
        let f = self.irb.forward(ctx, mn, layout)?;
        Ok(ctx.g.add(f, m)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub embed: PatchEmbedConfig,
    pub attention: AttentionConfig,
    pub depth: usize,
    pub eps: f64,
}

impl BackboneConfig {
    pub fn from_model(cfg: &crate::config::ModelConfig) -> Self {
        Self {
            embed: PatchEmbedConfig {
                height: cfg.image_size,
                width: cfg.image_size,
                channels: cfg.channels,
                patch: cfg.patch,
                dim: cfg.dim,
            },
            attention: AttentionConfig {
                heads: cfg.heads,
                window: cfg.window,
                shift: cfg.shift,
            },
            depth: cfg.depth,
            eps: cfg.norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        self.attention.validate(self.embed.dim)?;
        if self.embed.grid_h() != self.embed.grid_w() {
            return Err(Error::Config(
                "windowed attention needs a square token grid".into(),
            ));
        }
        if self.depth == 0 {
            return Err(Error::Config("backbone depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Trainable scalars: embedding `P²C·D + D + (Np+1)·D` plus `12D² + 63D` per block.
    pub fn param_count(&self) -> usize {
        let d = self.embed.dim;
        let embed = self.embed.patch_len() * d + d + (self.embed.num_patches() + 1) * d;
        embed + self.depth * (12 * d * d + 63 * d)
    }
}

pub struct SwinOutput {
    /// `[N * (T + 1), D]` final tokens.
    pub tokens: Var,
    /// `[N, D, g, g]` grid tokens as a feature map.
    pub grid: Var,
    /// `[N, D]` class-token states.
    pub cls: Var,
}

#[derive(Clone, Debug)]
pub struct SwinBackbone {
    pub cfg: BackboneConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
}

impl SwinBackbone {
    /// Blocks alternate unshifted / shifted windows, starting unshifted.
    pub(crate) fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(store, init, &format!("{prefix}.embed"), cfg.embed)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let shifted = i % 2 == 1 && cfg.attention.shift > 0;
                TransformerBlock::new(
                    store,
                    init,
                    &format!("{prefix}.blocks.{i}"),
                    cfg.embed.dim,
                    cfg.attention,
                    shifted,
                    cfg.eps,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, embed, blocks })
    }

    /// Builds a standalone backbone and its freshly initialised parameters.
    pub fn build(cfg: BackboneConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Self::new(&mut store, &mut Init { rng: &mut rng }, "swint", cfg)?;
        Ok((b, store))
    }

    pub fn grid(&self) -> usize {
        self.cfg.embed.grid_h()
    }

    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<SwinOutput> {
        let n = ctx.g.value(images).dim(0);
        let layout = TokenLayout {
            images: n,
            grid: self.grid(),
        };
        let mut x = self.embed.forward(ctx, images)?;
        for b in &self.blocks {
            x = b.forward(ctx, x, layout)?;
        }
        let d = self.cfg.embed.dim;
        let g = self.grid();
        let grid = ctx.g.permute(x, rows_to_grid(n, g, d), &[n, d, g, g])?;
        let cls = ctx
            .g
            .gather_rows(x, (0..n).map(|b| b * layout.per_image()).collect())?;
        Ok(SwinOutput {
            tokens: x,
            grid,
            cls,
        })
    }
}
