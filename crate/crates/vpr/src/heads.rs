//! Feature heads on top of the backbone feature map.
//!
//! The global head GeM-pools the map over its spatial extent and L2
//! normalizes the result into the retrieval descriptor (a class-token mode
//! exists for comparison). The local head upsamples the map with two 3x3
//! stride-2 transposed convolutions (ReLU between them) and L2 normalizes
//! each output location, producing the dense grid the re-ranking matcher
//! consumes.

use crate::backbone::BackboneOutput;
use crate::error::{Error, Result};
use crate::grid::LocalFeatureGrid;
use crate::params::Gradients;
use crate::rng::{fill_normal, seeded_rng};
use crate::tensor::{
    conv_transpose2d_backward, conv_transpose2d_forward, conv_transpose_output_extent,
    l2_normalize, l2_normalize_backward, relu, relu_grad, Tensor,
};

/// Numerical floor for per-location L2 normalization.
pub const INTRA_L2_EPS: f64 = 1e-12;
/// Floor applied to feature map values before raising to the GeM power.
pub const GEM_CLAMP_EPS: f64 = 1e-6;
/// Floor for normalizing the global descriptor.
pub const GLOBAL_L2_EPS: f64 = 1e-12;

/// Generalized-mean pooling over the spatial extent of an (h, w, c) map:
/// per channel, mean of clamped values raised to `p`, then the p-th root.
/// p = 1 is average pooling; large p approaches max pooling.
pub fn gem_pool(fm: &Tensor, p: f64, eps: f64) -> Result<Vec<f64>> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("GeM power must be >= 1, got {}", p)));
    }
    if fm.rank() != 3 {
        return Err(Error::shape(format!(
            "GeM expects an (h, w, c) map, got {:?}",
            fm.shape()
        )));
    }
    let (h, w, c) = (fm.dim(0), fm.dim(1), fm.dim(2));
    let spatial = (h * w) as f64;
    let mut acc = vec![0.0; c];
    for loc in fm.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(loc) {
            *a += v.max(eps).powf(p);
        }
    }
    Ok(acc.iter().map(|a| (a / spatial).powf(1.0 / p)).collect())
}

#[derive(Debug, Clone)]
pub struct GemCache {
    /// Mean of clamped values to the p-th power, per channel.
    pub mean_pow: Vec<f64>,
    /// Pooled output, per channel.
    pub pooled: Vec<f64>,
}

pub fn gem_pool_cached(fm: &Tensor, p: f64, eps: f64) -> Result<(Vec<f64>, GemCache)> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("GeM power must be >= 1, got {}", p)));
    }
    let (h, w, c) = (fm.dim(0), fm.dim(1), fm.dim(2));
    let spatial = (h * w) as f64;
    let mut acc = vec![0.0; c];
    for loc in fm.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(loc) {
            *a += v.max(eps).powf(p);
        }
    }
    let mean_pow: Vec<f64> = acc.iter().map(|a| a / spatial).collect();
    let pooled: Vec<f64> = mean_pow.iter().map(|m| m.powf(1.0 / p)).collect();
    Ok((
        pooled.clone(),
        GemCache { mean_pow, pooled },
    ))
}

/// Backward of GeM. Returns d(feature map) and d(p). Locations at or below
/// the clamp floor receive zero gradient.
pub fn gem_backward(
    fm: &Tensor,
    p: f64,
    eps: f64,
    cache: &GemCache,
    d_pooled: &[f64],
) -> (Tensor, f64) {
    let (h, w, c) = (fm.dim(0), fm.dim(1), fm.dim(2));
    let spatial = (h * w) as f64;

    // dy_c/dx = y_c^(1-p) * clamped^(p-1) / spatial, for unclamped entries.
    let mut d_fm = Tensor::zeros(fm.shape());
    let coef: Vec<f64> = cache
        .pooled
        .iter()
        .zip(d_pooled)
        .map(|(y, dy)| dy * y.powf(1.0 - p) / spatial)
        .collect();
    for (loc, dloc) in fm
        .data()
        .chunks_exact(c)
        .zip(d_fm.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            if loc[ch] > eps {
                dloc[ch] = coef[ch] * loc[ch].powf(p - 1.0);
            }
        }
    }

    // dy_c/dp = y_c * (-ln(m_c)/p^2 + m'_c/(p m_c)), m'_c = mean(x^p ln x).
    let mut dmean_dp = vec![0.0; c];
    for loc in fm.data().chunks_exact(c) {
        for (a, &v) in dmean_dp.iter_mut().zip(loc) {
            let x = v.max(eps);
            *a += x.powf(p) * x.ln();
        }
    }
    let mut dp = 0.0;
    for ch in 0..c {
        let m = cache.mean_pow[ch];
        let y = cache.pooled[ch];
        let dm = dmean_dp[ch] / spatial;
        dp += d_pooled[ch] * y * (-m.ln() / (p * p) + dm / (p * m));
    }
    (d_fm, dp)
}

/// How the global descriptor is produced from the backbone output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalMode {
    /// GeM pooling over the feature map (the default).
    Gem,
    /// The final class token, L2 normalized.
    ClassToken,
}

impl GlobalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GlobalMode::Gem => "gem",
            GlobalMode::ClassToken => "cls",
        }
    }

    pub fn parse(s: &str) -> Result<GlobalMode> {
        match s {
            "gem" => Ok(GlobalMode::Gem),
            "cls" => Ok(GlobalMode::ClassToken),
            other => Err(Error::invalid(format!("unknown global mode '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalCache {
    pub gem: Option<GemCache>,
    /// Vector just before L2 normalization.
    pub prenorm: Vec<f64>,
    pub norm: f64,
    pub feature: Vec<f64>,
}

/// Unit-norm global descriptor.
pub fn global_feature(
    out: &BackboneOutput,
    mode: GlobalMode,
    gem_p: f64,
    gem_eps: f64,
) -> Result<(Vec<f64>, GlobalCache)> {
    let (prenorm, gem) = match mode {
        GlobalMode::Gem => {
            let (pooled, cache) = gem_pool_cached(&out.feature_map, gem_p, gem_eps)?;
            (pooled, Some(cache))
        }
        GlobalMode::ClassToken => (out.class_token.clone(), None),
    };
    let (feature, norm) = l2_normalize(&prenorm, GLOBAL_L2_EPS);
    Ok((
        feature.clone(),
        GlobalCache {
            gem,
            prenorm,
            norm,
            feature,
        },
    ))
}

/// Backward of the global head. Returns (d feature_map, d class_token, d p).
pub fn global_feature_backward(
    out: &BackboneOutput,
    mode: GlobalMode,
    gem_p: f64,
    gem_eps: f64,
    cache: &GlobalCache,
    d_global: &[f64],
) -> (Tensor, Vec<f64>, f64) {
    let d_prenorm = l2_normalize_backward(&cache.feature, cache.norm, GLOBAL_L2_EPS, d_global);
    match mode {
        GlobalMode::Gem => {
            let (d_fm, dp) = gem_backward(
                &out.feature_map,
                gem_p,
                gem_eps,
                cache.gem.as_ref().expect("gem cache"),
                &d_prenorm,
            );
            (d_fm, vec![0.0; out.class_token.len()], dp)
        }
        GlobalMode::ClassToken => (Tensor::zeros(out.feature_map.shape()), d_prenorm, 0.0),
    }
}

/// One transposed-convolution stage.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// (cin, cout, k, k)
    pub w: Tensor,
    pub b: Vec<f64>,
}

/// Two-stage upsampling head. Stage geometry is fixed at kernel 3,
/// stride 2, padding 1, which roughly quadruples the location count per
/// stage: g -> 2g-1 -> 4g-3.
#[derive(Debug, Clone)]
pub struct LocalHeadParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

pub const HEAD_KERNEL: usize = 3;
pub const HEAD_STRIDE: usize = 2;
pub const HEAD_PADDING: usize = 1;

impl LocalHeadParams {
    pub fn init(in_channels: usize, mid_channels: usize, out_channels: usize, seed: u64) -> LocalHeadParams {
        let k = HEAD_KERNEL;
        let mut w1 = Tensor::zeros(&[in_channels, mid_channels, k, k]);
        let std1 = (2.0 / (in_channels + mid_channels) as f64 / (k * k) as f64).sqrt();
        fill_normal(&mut seeded_rng(seed, "head.conv1"), w1.data_mut(), std1);
        let mut w2 = Tensor::zeros(&[mid_channels, out_channels, k, k]);
        let std2 = (2.0 / (mid_channels + out_channels) as f64 / (k * k) as f64).sqrt();
        fill_normal(&mut seeded_rng(seed, "head.conv2"), w2.data_mut(), std2);
        LocalHeadParams {
            conv1: ConvParams {
                w: w1,
                b: vec![0.0; mid_channels],
            },
            conv2: ConvParams {
                w: w2,
                b: vec![0.0; out_channels],
            },
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.w.dim(0)
    }

    pub fn mid_channels(&self) -> usize {
        self.conv1.w.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.w.dim(1)
    }
}

/// Output grid side for an input side under the fixed stage geometry.
pub fn local_grid_extent(input: usize) -> Result<usize> {
    let mid = conv_transpose_output_extent(input, HEAD_KERNEL, HEAD_STRIDE, HEAD_PADDING)?;
    conv_transpose_output_extent(mid, HEAD_KERNEL, HEAD_STRIDE, HEAD_PADDING)
}

#[derive(Debug, Clone)]
pub struct LocalHeadCache {
    /// Stage-1 output before ReLU.
    pub c1_pre: Tensor,
    /// Stage-2 output before per-location normalization.
    pub c2_out: Tensor,
    /// Raw per-location norms of c2_out.
    pub norms: Vec<f64>,
}

impl LocalHeadCache {
    pub fn relu_mask(&self) -> Vec<bool> {
        self.c1_pre.data().iter().map(|v| *v > 0.0).collect()
    }
}

/// Dense local feature grid: upsample, ReLU, upsample, then L2 normalize
/// each grid location.
pub fn local_adaptation(fm: &Tensor, p: &LocalHeadParams) -> Result<LocalFeatureGrid> {
    Ok(local_adaptation_cached(fm, p)?.0)
}

pub fn local_adaptation_cached(
    fm: &Tensor,
    p: &LocalHeadParams,
) -> Result<(LocalFeatureGrid, LocalHeadCache)> {
    if fm.rank() != 3 || fm.dim(2) != p.in_channels() {
        return Err(Error::shape(format!(
            "local head expects (h, w, {}) map, got {:?}",
            p.in_channels(),
            fm.shape()
        )));
    }
    let c1_pre = conv_transpose2d_forward(fm, &p.conv1.w, &p.conv1.b, HEAD_STRIDE, HEAD_PADDING)?;
    let mut r1 = c1_pre.clone();
    for v in r1.data_mut() {
        *v = relu(*v);
    }
    let c2_out = conv_transpose2d_forward(&r1, &p.conv2.w, &p.conv2.b, HEAD_STRIDE, HEAD_PADDING)?;

    let (h, w, c) = (c2_out.dim(0), c2_out.dim(1), c2_out.dim(2));
    let mut grid = LocalFeatureGrid::zeros(h, w, c);
    let mut norms = vec![0.0; h * w];
    for (loc, (dst, norm)) in c2_out
        .data()
        .chunks_exact(c)
        .zip(grid.data_mut().chunks_exact_mut(c).zip(&mut norms))
    {
        let (y, n) = l2_normalize(loc, INTRA_L2_EPS);
        dst.copy_from_slice(&y);
        *norm = n;
    }
    Ok((
        grid,
        LocalHeadCache {
            c1_pre,
            c2_out,
            norms,
        },
    ))
}

/// Backward of the local head. Accumulates conv grads under `head.*` and
/// returns d(feature map).
pub fn local_adaptation_backward(
    fm: &Tensor,
    p: &LocalHeadParams,
    cache: &LocalHeadCache,
    grid: &LocalFeatureGrid,
    d_grid: &LocalFeatureGrid,
    grads: &mut Gradients,
) -> Result<Tensor> {
    let c = grid.channels();
    let mut d_c2 = Tensor::zeros(cache.c2_out.shape());
    for (loc, ((y, dy), norm)) in d_c2
        .data_mut()
        .chunks_exact_mut(c)
        .zip(
            grid.data()
                .chunks_exact(c)
                .zip(d_grid.data().chunks_exact(c))
                .zip(&cache.norms),
        )
    {
        let dv = l2_normalize_backward(y, *norm, INTRA_L2_EPS, dy);
        loc.copy_from_slice(&dv);
    }

    let mut r1 = cache.c1_pre.clone();
    for v in r1.data_mut() {
        *v = relu(*v);
    }
    let (d_r1, dw2, db2) = conv_transpose2d_backward(&r1, &p.conv2.w, &d_c2, HEAD_STRIDE, HEAD_PADDING);
    let mut d_c1 = d_r1;
    for (g, z) in d_c1.data_mut().iter_mut().zip(cache.c1_pre.data()) {
        *g *= relu_grad(*z);
    }
    let (d_fm, dw1, db1) = conv_transpose2d_backward(fm, &p.conv1.w, &d_c1, HEAD_STRIDE, HEAD_PADDING);

    grads.add("head.conv1.w", dw1.data());
    grads.add("head.conv1.b", &db1);
    grads.add("head.conv2.w", dw2.data());
    grads.add("head.conv2.b", &db2);
    Ok(d_fm)
}
