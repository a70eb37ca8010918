//! Forward and backward kernels.
//!
//! These are plain functions over [`Tensor`] values; [`crate::Graph`] records
//! them on the tape. They are also usable directly for inference-only code.

use rayon::prelude::*;

use crate::error::{arg_err, geom_err, shape_err, Result, TensorError};
use crate::tensor::Tensor;

fn check_finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// ---------------------------------------------------------------------------
// matmul

const PAR_THRESHOLD: usize = 1 << 16;

/// Row-major `[m,k] x [k,n]`. Each output row is produced by exactly one
/// thread in a fixed order, so results do not depend on the thread count.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    check_finite(
        "matmul",
        Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n)),
    )
}

/// Gradients of `a·b` given the upstream gradient `dout`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dout: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let bt = transpose_raw(b.data(), k, n);
    let da = gemm(dout.data(), &bt, m, n, k);
    let at = transpose_raw(a.data(), m, k);
    let db = gemm(&at, dout.data(), k, m, n);
    (
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    )
}

// ---------------------------------------------------------------------------
// convolution

/// Geometry of a 2-D convolution. `groups == in_channels` is depthwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride,
            pad,
            in_channels,
            out_channels,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, stride, pad)
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.stride > 0
            && self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.groups > 0
            && self.in_channels.is_multiple_of(self.groups)
            && self.out_channels.is_multiple_of(self.groups);
        if ok {
            Ok(())
        } else {
            Err(arg_err("conv2d", format!("invalid spec {self:?}")))
        }
    }

    /// Output extents for an `h x w` input; errors when either is below one.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |len: usize, k: usize| -> Option<usize> {
            let padded = len + 2 * self.pad;
            (padded >= k).then(|| (padded - k) / self.stride + 1)
        };
        match (out(h, self.kernel.0), out(w, self.kernel.1)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(geom_err(
                "conv2d",
                format!(
                    "kernel {:?} does not fit {h}x{w} with pad {}",
                    self.kernel, self.pad
                ),
            )),
        }
    }
}

fn check_conv(
    x: &Tensor,
    spec: &ConvSpec,
    w: &Tensor,
    b: Option<&Tensor>,
) -> Result<(usize, usize)> {
    spec.validate()?;
    if x.rank() != 4 || x.dim(1) != spec.in_channels {
        return Err(shape_err(
            "conv2d",
            format!("input {:?} vs {} channels", x.shape(), spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(shape_err(
            "conv2d",
            format!(
                "weights {:?}, expected {:?}",
                w.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(shape_err("conv2d", format!("bias {:?}", b.shape())));
        }
    }
    spec.output_hw(x.dim(2), x.dim(3))
}

/// Unfolds one group of one image into `[cg*kh*kw, oh*ow]` columns.
fn im2col(
    img: &[f64],
    cg: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (kh, kw) = spec.kernel;
    let mut cols = vec![0.0; cg * kh * kw * oh * ow];
    for c in 0..cg {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &img[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    cols: &[f64],
    img: &mut [f64],
    cg: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) {
    let (kh, kw) = spec.kernel;
    for c in 0..cg {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x: [N,C,H,W]` with `w: [K, C/groups, kh, kw]`.
pub fn conv2d(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (oh, ow) = check_conv(x, spec, w, b)?;
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let k = spec.out_channels;
    let (cg, kg) = (c / spec.groups, k / spec.groups);
    let patch = cg * spec.kernel.0 * spec.kernel.1;
    let plane = oh * ow;
    let mut out = vec![0.0; n * k * plane];
    out.par_chunks_mut(k * plane)
        .enumerate()
        .for_each(|(ni, out_img)| {
            for g in 0..spec.groups {
                let img = &x.data()[(ni * c + g * cg) * h * wd..(ni * c + (g + 1) * cg) * h * wd];
                let cols = im2col(img, cg, h, wd, spec, oh, ow);
                let wg = &w.data()[g * kg * patch..(g + 1) * kg * patch];
                let res = gemm(wg, &cols, kg, patch, plane);
                out_img[g * kg * plane..(g + 1) * kg * plane].copy_from_slice(&res);
            }
            if let Some(b) = b {
                for (ki, chunk) in out_img.chunks_mut(plane).enumerate() {
                    let bv = b.data()[ki];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    check_finite("conv2d", Tensor::from_parts(vec![n, k, oh, ow], out))
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(x: &Tensor, spec: &ConvSpec, w: &Tensor, dout: &Tensor) -> ConvGrads {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (dout.dim(2), dout.dim(3));
    let k = spec.out_channels;
    let (cg, kg) = (c / spec.groups, k / spec.groups);
    let patch = cg * spec.kernel.0 * spec.kernel.1;
    let plane = oh * ow;

    // Per-image partial weight gradients are summed afterwards in image order.
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dx_img = vec![0.0; c * h * wd];
            let mut dw_img = vec![0.0; w.numel()];
            for g in 0..spec.groups {
                let img = &x.data()[(ni * c + g * cg) * h * wd..(ni * c + (g + 1) * cg) * h * wd];
                let cols = im2col(img, cg, h, wd, spec, oh, ow);
                let dg = &dout.data()[(ni * k + g * kg) * plane..(ni * k + (g + 1) * kg) * plane];
                let cols_t = transpose_raw(&cols, patch, plane);
                let dwg = gemm(dg, &cols_t, kg, plane, patch);
                for (acc, v) in dw_img[g * kg * patch..(g + 1) * kg * patch]
                    .iter_mut()
                    .zip(&dwg)
                {
                    *acc += v;
                }
                let wg = &w.data()[g * kg * patch..(g + 1) * kg * patch];
                let wg_t = transpose_raw(wg, kg, patch);
                let dcols = gemm(&wg_t, dg, patch, kg, plane);
                col2im_add(
                    &dcols,
                    &mut dx_img[g * cg * h * wd..(g + 1) * cg * h * wd],
                    cg,
                    h,
                    wd,
                    spec,
                    oh,
                    ow,
                );
            }
            (dx_img, dw_img)
        })
        .collect();

    let mut dx = Vec::with_capacity(x.numel());
    let mut dw = vec![0.0; w.numel()];
    for (dx_img, dw_img) in per_image {
        dx.extend_from_slice(&dx_img);
        for (a, b) in dw.iter_mut().zip(&dw_img) {
            *a += b;
        }
    }
    let mut db = vec![0.0; k];
    for ni in 0..n {
        for (ki, acc) in db.iter_mut().enumerate() {
            *acc += dout.data()[(ni * k + ki) * plane..(ni * k + ki + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    ConvGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dw: Tensor::from_parts(w.shape().to_vec(), dw),
        db: Tensor::from_parts(vec![k], db),
    }
}

// ---------------------------------------------------------------------------
// pooling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub size: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn max(size: usize, stride: usize) -> Self {
        Self {
            mode: PoolMode::Max,
            size,
            stride,
        }
    }

    pub fn avg(size: usize, stride: usize) -> Self {
        Self {
            mode: PoolMode::Avg,
            size,
            stride,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.size == 0 || self.stride == 0 {
            return Err(arg_err("pool2d", "window and stride must be positive"));
        }
        if self.size > h || self.size > w {
            return Err(geom_err(
                "pool2d",
                format!("window {} larger than input {h}x{w}", self.size),
            ));
        }
        Ok((
            (h - self.size) / self.stride + 1,
            (w - self.size) / self.stride + 1,
        ))
    }
}

/// Pooled output plus, for max mode, the flat input index each output came from.
pub fn pool2d(x: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(shape_err(
            "pool2d",
            format!("rank 4 expected, got {:?}", x.shape()),
        ));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = spec.output_hw(h, w)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::new();
    let area = (spec.size * spec.size) as f64;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * spec.stride, ox * spec.stride);
                match spec.mode {
                    PoolMode::Max => {
                        let mut best = base + y0 * w + x0;
                        for dy in 0..spec.size {
                            for dx in 0..spec.size {
                                let idx = base + (y0 + dy) * w + x0 + dx;
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x.data()[best]);
                        arg.push(best);
                    }
                    PoolMode::Avg => {
                        let mut s = 0.0;
                        for dy in 0..spec.size {
                            for dx in 0..spec.size {
                                s += x.data()[base + (y0 + dy) * w + x0 + dx];
                            }
                        }
                        out.push(s / area);
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn pool2d_backward(
    x_shape: &[usize],
    spec: &PoolSpec,
    argmax: &[usize],
    dout: &Tensor,
) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    match spec.mode {
        PoolMode::Max => {
            for (&src, &g) in argmax.iter().zip(dout.data()) {
                dx.data_mut()[src] += g;
            }
        }
        PoolMode::Avg => {
            let (h, w) = (x_shape[2], x_shape[3]);
            let (oh, ow) = (dout.dim(2), dout.dim(3));
            let share = 1.0 / (spec.size * spec.size) as f64;
            for plane in 0..x_shape[0] * x_shape[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dout.data()[(plane * oh + oy) * ow + ox] * share;
                        for dy in 0..spec.size {
                            for dx_ in 0..spec.size {
                                let idx = (plane * h + oy * spec.stride + dy) * w
                                    + ox * spec.stride
                                    + dx_;
                                dx.data_mut()[idx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// normalization

/// Splits a shape of rank >= 2 into (outer, channels, inner) around axis 1.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Per-channel statistics for batch normalization, channel axis 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
    pub scale: Option<Vec<f64>>,
    pub shift: Option<Vec<f64>>,
}

impl NormStats {
    /// Biased per-channel mean and variance of `x`.
    pub fn from_batch(x: &Tensor, eps: f64) -> Result<Self> {
        let (mean, var) = batch_stats(x)?;
        Ok(Self {
            mean,
            var,
            eps,
            scale: None,
            shift: None,
        })
    }

    pub fn with_affine(mut self, scale: Vec<f64>, shift: Vec<f64>) -> Self {
        self.scale = Some(scale);
        self.shift = Some(shift);
        self
    }
}

pub fn batch_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rank() < 2 {
        return Err(shape_err(
            "batch_norm",
            format!("rank >= 2 expected, got {:?}", x.shape()),
        ));
    }
    let (outer, c, inner) = channel_layout(x.shape());
    let m = (outer * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let s = &x.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
            mean[ch] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for o in 0..outer {
        for ch in 0..c {
            let s = &x.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
            var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    Ok((mean, var))
}

fn inv_std(var: f64, eps: f64) -> f64 {
    let d = (var + eps).sqrt();
    // A zero denominator only arises with eps == 0 on a constant channel,
    // where the numerator is zero as well.
    if d > 0.0 {
        1.0 / d
    } else {
        0.0
    }
}

/// `(x - mean) / sqrt(var + eps)`, then the optional per-channel affine map.
pub fn batch_norm(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(shape_err(
            "batch_norm",
            format!("rank >= 2 expected, got {:?}", x.shape()),
        ));
    }
    let (outer, c, inner) = channel_layout(x.shape());
    if outer * inner == 0 {
        return Err(geom_err("batch_norm", "channel has no elements"));
    }
    if !(stats.eps >= 0.0) {
        return Err(arg_err(
            "batch_norm",
            format!("eps must be non-negative, got {}", stats.eps),
        ));
    }
    let sized = |v: &[f64]| v.len() == c;
    if !sized(&stats.mean)
        || !sized(&stats.var)
        || stats.scale.as_deref().is_some_and(|s| !sized(s))
        || stats.shift.as_deref().is_some_and(|s| !sized(s))
    {
        return Err(shape_err(
            "batch_norm",
            format!("statistics do not match {c} channels"),
        ));
    }
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let is = inv_std(stats.var[ch], stats.eps);
            let g = stats.scale.as_ref().map_or(1.0, |s| s[ch]);
            let b = stats.shift.as_ref().map_or(0.0, |s| s[ch]);
            for v in &mut out[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                *v = (*v - stats.mean[ch]) * is * g + b;
            }
        }
    }
    check_finite("batch_norm", Tensor::from_parts(x.shape().to_vec(), out))
}

/// Normalized activations and inverse standard deviations saved for backward.
pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnSaved, Vec<f64>, Vec<f64>)> {
    let (mean, var) = batch_stats(x)?;
    let (outer, c, inner) = channel_layout(x.shape());
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batch_norm",
            format!("affine params do not match {c} channels"),
        ));
    }
    let istd: Vec<f64> = var.iter().map(|&v| inv_std(v, eps)).collect();
    let mut xhat = x.data().to_vec();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for ch in 0..c {
            let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
            for (xh, y) in xhat[r.clone()].iter_mut().zip(&mut out[r]) {
                *xh = (*xh - mean[ch]) * istd[ch];
                *y = *xh * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    let y = check_finite("batch_norm", Tensor::from_parts(x.shape().to_vec(), out))?;
    Ok((
        y,
        BnSaved {
            xhat,
            inv_std: istd,
        },
        mean,
        var,
    ))
}

/// Returns (dx, dgamma, dbeta) for batch normalization using batch statistics.
pub(crate) fn batch_norm_train_backward(
    saved: &BnSaved,
    gamma: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (outer, c, inner) = channel_layout(dout.shape());
    let m = (outer * inner) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
            for (g, xh) in dout.data()[r.clone()].iter().zip(&saved.xhat[r]) {
                dbeta[ch] += g;
                dgamma[ch] += g * xh;
            }
        }
    }
    let mut dx = vec![0.0; dout.numel()];
    for o in 0..outer {
        for ch in 0..c {
            let k = gamma.data()[ch] * saved.inv_std[ch] / m;
            let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
            for ((d, g), xh) in dx[r.clone()]
                .iter_mut()
                .zip(&dout.data()[r.clone()])
                .zip(&saved.xhat[r])
            {
                *d = k * (m * g - dbeta[ch] - xh * dgamma[ch]);
            }
        }
    }
    (
        Tensor::from_parts(dout.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

pub(crate) struct LnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row over the last axis and applies the optional affine map.
pub fn layer_norm(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f64,
) -> Result<Tensor> {
    layer_norm_saved(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_saved(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f64,
) -> Result<(Tensor, LnSaved)> {
    let d = *x.shape().last().unwrap();
    for p in [gamma, beta].into_iter().flatten() {
        if p.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("affine {:?} vs last axis {d}", p.shape()),
            ));
        }
    }
    if !(eps >= 0.0) {
        return Err(arg_err(
            "layer_norm",
            format!("eps must be non-negative, got {eps}"),
        ));
    }
    let rows = x.numel() / d;
    let mut xhat = x.data().to_vec();
    let mut istd = Vec::with_capacity(rows);
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &mut xhat[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = inv_std(var, eps);
        istd.push(is);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * is;
            let g = gamma.map_or(1.0, |g| g.data()[j]);
            let b = beta.map_or(0.0, |b| b.data()[j]);
            out[r * d + j] = *v * g + b;
        }
    }
    let y = check_finite("layer_norm", Tensor::from_parts(x.shape().to_vec(), out))?;
    Ok((
        y,
        LnSaved {
            xhat,
            inv_std: istd,
        },
    ))
}

pub(crate) fn layer_norm_backward(
    saved: &LnSaved,
    gamma: Option<&Tensor>,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = *dout.shape().last().unwrap();
    let rows = dout.numel() / d;
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = vec![0.0; dout.numel()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = &dout.data()[r * d..(r + 1) * d];
        let xh = &saved.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dbeta[j] += g[j];
            dgamma[j] += g[j] * xh[j];
            dxhat[j] = g[j] * gamma.map_or(1.0, |t| t.data()[j]);
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = saved.inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (
        Tensor::from_parts(dout.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

// ---------------------------------------------------------------------------
// activations

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn softmax_backward(y: &Tensor, dout: &Tensor) -> Tensor {
    let c = *y.shape().last().unwrap();
    let mut dx = vec![0.0; y.numel()];
    for ((d, yr), gr) in dx
        .chunks_mut(c)
        .zip(y.data().chunks(c))
        .zip(dout.data().chunks(c))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            d[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Row-wise `log(sum(exp(x)))` over the last axis.
pub fn logsumexp_rows(x: &Tensor) -> Vec<f64> {
    let c = *x.shape().last().unwrap();
    x.data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * normal_cdf(v))
}

pub fn gelu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dout.data())
            .map(|(&v, &g)| g * (normal_cdf(v) + v * normal_pdf(v)))
            .collect(),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

// ---------------------------------------------------------------------------
// layout

/// Splits a shape into (outer, axis extent, inner) around `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| arg_err("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(arg_err(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    for x in xs {
        let same = x.rank() == first.rank()
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(shape_err(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", x.shape(), first.shape()),
            ));
        }
    }
    let total: usize = xs.iter().map(|x| x.dim(axis)).sum();
    let (outer, _, inner) = axis_layout(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let len = x.dim(axis) * inner;
            out.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Channel concatenation of `[N, C_i, ...]` tensors.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.iter().any(|x| x.rank() < 2) {
        return Err(shape_err("concat_channels", "inputs need a channel axis"));
    }
    concat(xs, 1)
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.dim(axis) {
        return Err(arg_err(
            "narrow",
            format!("range {start}+{len} on axis {axis} of {:?}", x.shape()),
        ));
    }
    let (outer, ext, inner) = axis_layout(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn narrow_backward(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    dout: &Tensor,
) -> Tensor {
    let (outer, ext, inner) = axis_layout(x_shape, axis);
    let len = dout.dim(axis);
    let mut dx = Tensor::zeros(x_shape);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        dx.data_mut()[base..base + len * inner]
            .copy_from_slice(&dout.data()[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}

/// Selects rows (slices along axis 0) in the given order; repeats allowed.
pub fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let n = x.dim(0);
    if rows.is_empty() || rows.iter().any(|&r| r >= n) {
        return Err(arg_err(
            "gather_rows",
            format!("indices out of range for {n} rows"),
        ));
    }
    let width = x.numel() / n;
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn gather_rows_backward(x_shape: &[usize], rows: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let width = dx.numel() / x_shape[0];
    for (i, &r) in rows.iter().enumerate() {
        for (a, b) in dx.data_mut()[r * width..(r + 1) * width]
            .iter_mut()
            .zip(&dout.data()[i * width..(i + 1) * width])
        {
            *a += b;
        }
    }
    dx
}

/// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.rank() != 4 || factor == 0 {
        return Err(arg_err(
            "upsample",
            format!(
                "rank-4 input and positive factor required, got {:?} x{factor}",
                x.shape()
            ),
        ));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(x.data()[(plane * h + oy / factor) * w + ox / factor]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn upsample_nearest_backward(x_shape: &[usize], factor: usize, dout: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(x_shape);
    for plane in 0..x_shape[0] * x_shape[1] {
        for oy in 0..oh {
            for ox in 0..ow {
                dx.data_mut()[(plane * h + oy / factor) * w + ox / factor] +=
                    dout.data()[(plane * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

/// Mean over all spatial positions: `[N,C,...] -> [N,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(shape_err(
            "global_avg_pool",
            format!("spatial axes required, got {:?}", x.shape()),
        ));
    }
    let (n, c, inner) = channel_layout(x.shape());
    let out = x
        .data()
        .chunks(inner)
        .map(|s| s.iter().sum::<f64>() / inner as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_extent_rule() {
        let s = ConvSpec::new(1, 1, 3, 2, 1);
        assert_eq!(s.output_hw(224, 224).unwrap(), (112, 112));
        let s = ConvSpec::new(1, 1, 5, 1, 0);
        assert!(s.output_hw(4, 4).is_err());
        assert_eq!(s.output_hw(5, 5).unwrap(), (1, 1));
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let spec = ConvSpec::new(3, 1, 3, 1, 1);
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(matches!(
            conv2d(&x, &spec, &w, None),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pool_window_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(pool2d(&x, &PoolSpec::max(3, 1)).is_err());
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 2, 2], |i| -(i as f64));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(narrow(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(narrow(&c, 1, 3, 1).unwrap(), b);
    }

    #[test]
    fn upsample_repeats_values() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
