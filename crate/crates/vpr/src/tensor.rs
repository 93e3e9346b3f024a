//! Dense row-major tensors and the small set of neural-net kernels the rest
//! of the crate is built from: matrix products, layer norm, multi-head
//! attention, GELU/ReLU, transposed convolution and L2 normalization.
//!
//! Every forward kernel has a matching hand-derived backward kernel; there is
//! no tape or graph. Caches hold exactly the values the backward pass needs.
//! All in-memory math is f64.

use crate::error::{Error, Result};

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// NaN and infinity are never valid tensor contents; callers that ingest
    /// external data run this check instead of paying for it on every op.
    pub fn validate_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("tensor contains non-finite values"))
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out = a (m x k) * b (k x n).
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_nn_into(a, b, m, k, n, &mut out);
    out
}

/// out += a (m x k) * b (k x n). `out` must be m x n.
pub fn matmul_nn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            axpy(av, brow, orow);
        }
    }
}

/// out = a (m x k) * b^T where b is (n x k).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_nt_into(a, b, m, k, n, &mut out);
    out
}

/// out += a (m x k) * b^T where b is (n x k).
pub fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, ov) in orow.iter_mut().enumerate() {
            *ov += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out = a^T * b where a is (k x m) and b is (k x n).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_tn_into(a, b, m, k, n, &mut out);
    out
}

/// out += a^T * b where a is (k x m) and b is (k x n).
pub fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for r in 0..k {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            axpy(av, brow, &mut out[i * n..(i + 1) * n]);
        }
    }
}

pub fn add_row_bias(x: &mut [f64], rows: usize, bias: &[f64]) {
    let n = bias.len();
    debug_assert_eq!(x.len(), rows * n);
    for r in 0..rows {
        for (v, b) in x[r * n..(r + 1) * n].iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

pub fn column_sums(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += *v;
        }
    }
    out
}

/// y = x * w + b for x (n x din), w (din x dout), b (dout).
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = w.dim(1);
    debug_assert_eq!(w.dim(0), din);
    debug_assert_eq!(b.len(), dout);
    let mut y = matmul_nn(x.data(), w.data(), n, din, dout);
    add_row_bias(&mut y, n, b);
    Tensor::from_vec(&[n, dout], y).expect("linear output shape")
}

/// Returns (dx, dw, db) for y = x * w + b given upstream dy.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = w.dim(1);
    let dx = matmul_nt(dy.data(), w.data(), n, dout, din);
    let dw = matmul_tn(x.data(), dy.data(), din, n, dout);
    let db = column_sums(dy.data(), n, dout);
    (
        Tensor::from_vec(&[n, din], dx).unwrap(),
        Tensor::from_vec(&[din, dout], dw).unwrap(),
        db,
    )
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Per-row layer norm of x (n x d) with learned gamma/beta of length d.
/// Variance is the biased (mean of squared deviations) estimate.
pub fn layer_norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Tensor, LayerNormCache) {
    let (n, d) = (x.dim(0), x.dim(1));
    debug_assert_eq!(gamma.len(), d);
    debug_assert_eq!(beta.len(), d);
    let mut y = vec![0.0; n * d];
    let mut mean = vec![0.0; n];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let out = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] = gamma[j] * (row[j] - mu) * rs + beta[j];
        }
    }
    (
        Tensor::from_vec(&[n, d], y).unwrap(),
        LayerNormCache { mean, rstd },
    )
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &[f64],
    cache: &LayerNormCache,
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, d) = (x.dim(0), x.dim(1));
    let mut dx = vec![0.0; n * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let inv_d = 1.0 / d as f64;
    for r in 0..n {
        let row = &x.data()[r * d..(r + 1) * d];
        let dyr = &dy.data()[r * d..(r + 1) * d];
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = dyr[j] * gamma[j];
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let out = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = dyr[j] * gamma[j];
            out[j] = rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
    (Tensor::from_vec(&[n, d], dx).unwrap(), dgamma, dbeta)
}

/// Numerically stable softmax over each row of x (n x m), in place.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// dz for z -> y = softmax(z): dz_i = y_i * (dy_i - sum_j y_j dy_j), per row.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dz = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let s = dot(yr, dyr);
        let out = &mut dz[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out[j] = yr[j] * (dyr[j] - s);
        }
    }
    dz
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// d gelu / dx evaluated at x.
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

/// Projection weights for multi-head attention over token matrix x (n x d).
/// Each weight is d x d: the per-head projections live in column blocks.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub wq: Tensor,
    pub bq: Vec<f64>,
    pub wk: Tensor,
    pub bk: Vec<f64>,
    pub wv: Tensor,
    pub bv: Vec<f64>,
    pub wo: Tensor,
    pub bo: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Post-softmax attention, one (n x n) matrix per head.
    pub attn: Vec<Vec<f64>>,
    /// Heads concatenated back to (n x d), before the output projection.
    pub concat: Tensor,
}

fn head_slice(src: &[f64], n: usize, d: usize, head: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dh];
    for t in 0..n {
        out[t * dh..(t + 1) * dh].copy_from_slice(&src[t * d + head * dh..t * d + (head + 1) * dh]);
    }
    out
}

fn head_scatter_add(dst: &mut [f64], src: &[f64], n: usize, d: usize, head: usize, dh: usize) {
    for t in 0..n {
        for j in 0..dh {
            dst[t * d + head * dh + j] += src[t * dh + j];
        }
    }
}

/// Scaled dot-product attention with `heads` heads over x (n x d).
pub fn multi_head_attention(
    x: &Tensor,
    params: &MhaParams,
    heads: usize,
) -> Result<(Tensor, MhaCache)> {
    let (n, d) = (x.dim(0), x.dim(1));
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "embed dim {} not divisible by {} heads",
            d, heads
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear_forward(x, &params.wq, &params.bq);
    let k = linear_forward(x, &params.wk, &params.bk);
    let v = linear_forward(x, &params.wv, &params.bv);

    let mut concat = vec![0.0; n * d];
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q.data(), n, d, h, dh);
        let kh = head_slice(k.data(), n, d, h, dh);
        let vh = head_slice(v.data(), n, d, h, dh);
        let mut scores = matmul_nt(&qh, &kh, n, dh, n);
        for s in &mut scores {
            *s *= scale;
        }
        softmax_rows(&mut scores, n, n);
        let oh = matmul_nn(&scores, &vh, n, n, dh);
        for t in 0..n {
            concat[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(&oh[t * dh..(t + 1) * dh]);
        }
        attn.push(scores);
    }
    let concat = Tensor::from_vec(&[n, d], concat).unwrap();
    let y = linear_forward(&concat, &params.wo, &params.bo);
    Ok((y, MhaCache { q, k, v, attn, concat }))
}

/// Gradients for every attention parameter plus the input.
#[derive(Debug, Clone)]
pub struct MhaGrads {
    pub dx: Tensor,
    pub dwq: Tensor,
    pub dbq: Vec<f64>,
    pub dwk: Tensor,
    pub dbk: Vec<f64>,
    pub dwv: Tensor,
    pub dbv: Vec<f64>,
    pub dwo: Tensor,
    pub dbo: Vec<f64>,
}

pub fn multi_head_attention_backward(
    x: &Tensor,
    params: &MhaParams,
    heads: usize,
    cache: &MhaCache,
    dy: &Tensor,
) -> MhaGrads {
    let (n, d) = (x.dim(0), x.dim(1));
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (d_concat, dwo, dbo) = linear_backward(&cache.concat, &params.wo, dy);

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    for h in 0..heads {
        let qh = head_slice(cache.q.data(), n, d, h, dh);
        let kh = head_slice(cache.k.data(), n, d, h, dh);
        let vh = head_slice(cache.v.data(), n, d, h, dh);
        let doh = head_slice(d_concat.data(), n, d, h, dh);
        let a = &cache.attn[h];

        let da = matmul_nt(&doh, &vh, n, dh, n);
        let dvh = matmul_tn(a, &doh, n, n, dh);
        let mut ds = softmax_rows_backward(a, &da, n, n);
        for s in &mut ds {
            *s *= scale;
        }
        let dqh = matmul_nn(&ds, &kh, n, n, dh);
        let dkh = matmul_tn(&ds, &qh, n, n, dh);

        head_scatter_add(&mut dq, &dqh, n, d, h, dh);
        head_scatter_add(&mut dk, &dkh, n, d, h, dh);
        head_scatter_add(&mut dv, &dvh, n, d, h, dh);
    }
    let dq = Tensor::from_vec(&[n, d], dq).unwrap();
    let dk = Tensor::from_vec(&[n, d], dk).unwrap();
    let dv = Tensor::from_vec(&[n, d], dv).unwrap();

    let (dxq, dwq, dbq) = linear_backward(x, &params.wq, &dq);
    let (dxk, dwk, dbk) = linear_backward(x, &params.wk, &dk);
    let (dxv, dwv, dbv) = linear_backward(x, &params.wv, &dv);
    let mut dx = dxq;
    dx.add_assign(&dxk);
    dx.add_assign(&dxv);

    MhaGrads {
        dx,
        dwq,
        dbq,
        dwk,
        dbk,
        dwv,
        dbv,
        dwo,
        dbo,
    }
}

// ---------------------------------------------------------------------------
// Transposed convolution (channel-last layout)
// ---------------------------------------------------------------------------

/// Output side length for a square transposed conv: (h-1)*stride - 2*pad + k.
pub fn conv_transpose_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input == 0 || stride == 0 {
        return Err(Error::invalid("transposed conv needs input >= 1, stride >= 1"));
    }
    let out = (input - 1) as isize * stride as isize - 2 * pad as isize + kernel as isize;
    if out <= 0 {
        return Err(Error::invalid(format!(
            "transposed conv output extent {} must be positive",
            out
        )));
    }
    Ok(out as usize)
}

/// Transposed 2-D convolution. x is (h, w, cin), weights are
/// (cin, cout, k, k), bias is (cout). Each input pixel scatters a k x k
/// stamp into the output at stride spacing.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (h, wd, cin) = (x.dim(0), x.dim(1), x.dim(2));
    let (wcin, cout, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if wcin != cin {
        return Err(Error::shape(format!(
            "transposed conv: input has {} channels, kernel expects {}",
            cin, wcin
        )));
    }
    if bias.len() != cout {
        return Err(Error::shape("transposed conv: bias length != out channels"));
    }
    let oh = conv_transpose_output_extent(h, kh, stride, pad)?;
    let ow = conv_transpose_output_extent(wd, kw, stride, pad)?;

    let mut y = vec![0.0; oh * ow * cout];
    for out_px in y.chunks_exact_mut(cout) {
        out_px.copy_from_slice(bias);
    }
    let xd = x.data();
    let wdata = w.data();
    for iy in 0..h {
        for ix in 0..wd {
            let xpix = &xd[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
            for ky in 0..kh {
                let oy = iy as isize * stride as isize - pad as isize + ky as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ox = ix as isize * stride as isize - pad as isize + kx as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    let opix = (oy as usize * ow + ox as usize) * cout;
                    let out = &mut y[opix..opix + cout];
                    // weight index for (ci, co, ky, kx) = ((ci*cout + co)*kh + ky)*kw + kx
                    for (ci, &xv) in xpix.iter().enumerate() {
                        for (co, ov) in out.iter_mut().enumerate() {
                            *ov += xv * wdata[((ci * cout + co) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, cout], y)
}

/// Returns (dx, dw, db) for the transposed conv above.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Vec<f64>) {
    let (h, wd, cin) = (x.dim(0), x.dim(1), x.dim(2));
    let (_, cout, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (oh, ow) = (dy.dim(0), dy.dim(1));

    let mut dx = vec![0.0; h * wd * cin];
    let mut dw = vec![0.0; w.numel()];
    let db = column_sums(dy.data(), oh * ow, cout);

    let xd = x.data();
    let wdata = w.data();
    let dyd = dy.data();
    for iy in 0..h {
        for ix in 0..wd {
            let xpix = &xd[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
            let dxpix_base = (iy * wd + ix) * cin;
            for ky in 0..kh {
                let oy = iy as isize * stride as isize - pad as isize + ky as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ox = ix as isize * stride as isize - pad as isize + kx as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    let dpix = &dyd[(oy as usize * ow + ox as usize) * cout..][..cout];
                    for ci in 0..cin {
                        let mut acc = 0.0;
                        for (co, &dv) in dpix.iter().enumerate() {
                            let widx = ((ci * cout + co) * kh + ky) * kw + kx;
                            acc += dv * wdata[widx];
                            dw[widx] += xpix[ci] * dv;
                        }
                        dx[dxpix_base + ci] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[h, wd, cin], dx).unwrap(),
        Tensor::from_vec(w.shape(), dw).unwrap(),
        db,
    )
}

// ---------------------------------------------------------------------------
// L2 normalization
// ---------------------------------------------------------------------------

/// y = v / max(||v||, eps). Returns the normalized vector and the raw norm.
pub fn l2_normalize(v: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let norm = dot(v, v).sqrt();
    let denom = norm.max(eps);
    (v.iter().map(|x| x / denom).collect(), norm)
}

/// Backward of l2_normalize given the forward output y and raw norm.
/// Above the clamp the Jacobian is (I - y y^T) / norm; below it the map is
/// linear with slope 1/eps.
pub fn l2_normalize_backward(y: &[f64], raw_norm: f64, eps: f64, dy: &[f64]) -> Vec<f64> {
    if raw_norm > eps {
        let proj = dot(y, dy);
        y.iter()
            .zip(dy)
            .map(|(yi, di)| (di - yi * proj) / raw_norm)
            .collect()
    } else {
        dy.iter().map(|d| d / eps).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "index {}: {} vs {} (tol {})",
                i,
                x,
                y,
                tol
            );
        }
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn validate_finite_flags_nan() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.validate_finite().is_ok());
        t.data_mut()[2] = f64::NAN;
        assert!(t.validate_finite().is_err());
    }

    #[test]
    fn matmul_variants_match_naive_reference() {
        let mut r = rng(11);
        let (m, k, n) = (7, 5, 9);
        let a = rand_vec(&mut r, m * k);
        let b = rand_vec(&mut r, k * n);
        assert_close(&matmul_nn(&a, &b, m, k, n), &naive_matmul(&a, &b, m, k, n), 1e-12);

        // a * b^T with b stored (n x k)
        let bt: Vec<f64> = {
            let mut t = vec![0.0; n * k];
            for i in 0..k {
                for j in 0..n {
                    t[j * k + i] = b[i * n + j];
                }
            }
            t
        };
        assert_close(&matmul_nt(&a, &bt, m, k, n), &naive_matmul(&a, &b, m, k, n), 1e-12);

        // a^T * b with a stored (k x m)
        let at: Vec<f64> = {
            let mut t = vec![0.0; k * m];
            for i in 0..m {
                for j in 0..k {
                    t[j * m + i] = a[i * k + j];
                }
            }
            t
        };
        assert_close(&matmul_tn(&at, &b, m, k, n), &naive_matmul(&a, &b, m, k, n), 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut r = rng(12);
        let (n, din, dout) = (3, 4, 5);
        let x = Tensor::from_vec(&[n, din], rand_vec(&mut r, n * din)).unwrap();
        let w = Tensor::from_vec(&[din, dout], rand_vec(&mut r, din * dout)).unwrap();
        let b = rand_vec(&mut r, dout);
        let dy = Tensor::from_vec(&[n, dout], rand_vec(&mut r, n * dout)).unwrap();

        let loss = |x: &Tensor, w: &Tensor, b: &[f64]| -> f64 {
            let y = linear_forward(x, w, b);
            dot(y.data(), dy.data())
        };
        let (dx, dw, db) = linear_backward(&x, &w, &dy);

        let h = 1e-6;
        for idx in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..w.numel() {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((num - dw.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..b.len() {
            let mut bp = b.clone();
            bp[idx] += h;
            let mut bm = b.clone();
            bm[idx] -= h;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((num - db[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_gamma_moments() {
        // With constant gamma the output row has mean = mean(beta) and
        // variance = gamma^2 exactly (up to the eps term).
        let mut r = rng(13);
        let d = 8;
        let x = Tensor::from_vec(&[1, d], rand_vec(&mut r, d)).unwrap();
        let gamma = vec![1.7; d];
        let beta = rand_vec(&mut r, d);
        let (y, _) = layer_norm_forward(&x, &gamma, &beta, 1e-12);

        let beta_mean = beta.iter().sum::<f64>() / d as f64;
        let ymean = y.data().iter().sum::<f64>() / d as f64;

        // variance of gamma*xhat part: subtract beta contribution per element
        let centered: Vec<f64> = y.data().iter().zip(&beta).map(|(v, b)| v - b).collect();
        let cm = centered.iter().sum::<f64>() / d as f64;
        let var = centered.iter().map(|v| (v - cm) * (v - cm)).sum::<f64>() / d as f64;

        assert!((ymean - beta_mean).abs() < 1e-9, "{} vs {}", ymean, beta_mean);
        assert!((var - 1.7 * 1.7).abs() < 1e-8, "var {}", var);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut r = rng(14);
        let (n, d) = (3, 6);
        let x = Tensor::from_vec(&[n, d], rand_vec(&mut r, n * d)).unwrap();
        let gamma = rand_vec(&mut r, d);
        let beta = rand_vec(&mut r, d);
        let dy = Tensor::from_vec(&[n, d], rand_vec(&mut r, n * d)).unwrap();
        let eps = 1e-6;

        let loss = |x: &Tensor, g: &[f64], b: &[f64]| -> f64 {
            let (y, _) = layer_norm_forward(x, g, b, eps);
            dot(y.data(), dy.data())
        };
        let (y0, cache) = layer_norm_forward(&x, &gamma, &beta, eps);
        let _ = y0;
        let (dx, dgamma, dbeta) = layer_norm_backward(&x, &gamma, &cache, &dy);

        let h = 1e-6;
        for idx in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-5);
        }
        for idx in 0..d {
            let mut gp = gamma.clone();
            gp[idx] += h;
            let mut gm = gamma.clone();
            gm[idx] -= h;
            let num = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!((num - dgamma[idx]).abs() < 1e-5);
            let mut bp = beta.clone();
            bp[idx] += h;
            let mut bm = beta.clone();
            bm[idx] -= h;
            let num = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!((num - dbeta[idx]).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_checks() {
        let mut r = rng(15);
        let (rows, cols) = (4, 7);
        let z = rand_vec(&mut r, rows * cols);
        let mut y = z.clone();
        softmax_rows(&mut y, rows, cols);
        for row in y.chunks(cols) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let dy = rand_vec(&mut r, rows * cols);
        let dz = softmax_rows_backward(&y, &dy, rows, cols);
        let h = 1e-6;
        for idx in 0..z.len() {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            softmax_rows(&mut zp, rows, cols);
            softmax_rows(&mut zm, rows, cols);
            let fp = dot(&zp, &dy);
            let fm = dot(&zm, &dy);
            let num = (fp - fm) / (2.0 * h);
            assert!((num - dz[idx]).abs() < 1e-6);
        }
    }

    /// Scalar-loop attention written independently of the production kernel.
    fn naive_attention(x: &Tensor, p: &MhaParams, heads: usize) -> Tensor {
        let (n, d) = (x.dim(0), x.dim(1));
        let dh = d / heads;
        let project = |w: &Tensor, b: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * d];
            for t in 0..n {
                for j in 0..d {
                    let mut s = b[j];
                    for i in 0..d {
                        s += x.data()[t * d + i] * w.data()[i * d + j];
                    }
                    out[t * d + j] = s;
                }
            }
            out
        };
        let q = project(&p.wq, &p.bq);
        let k = project(&p.wk, &p.bk);
        let v = project(&p.wv, &p.bv);
        let mut concat = vec![0.0; n * d];
        for h in 0..heads {
            for t in 0..n {
                let mut scores = vec![0.0; n];
                for u in 0..n {
                    let mut s = 0.0;
                    for j in 0..dh {
                        s += q[t * d + h * dh + j] * k[u * d + h * dh + j];
                    }
                    scores[u] = s / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for e in &mut exps {
                    *e /= sum;
                }
                for j in 0..dh {
                    let mut o = 0.0;
                    for u in 0..n {
                        o += exps[u] * v[u * d + h * dh + j];
                    }
                    concat[t * d + h * dh + j] = o;
                }
            }
        }
        let mut y = vec![0.0; n * d];
        for t in 0..n {
            for j in 0..d {
                let mut s = p.bo[j];
                for i in 0..d {
                    s += concat[t * d + i] * p.wo.data()[i * d + j];
                }
                y[t * d + j] = s;
            }
        }
        Tensor::from_vec(&[n, d], y).unwrap()
    }

    fn random_mha_params(r: &mut ChaCha8Rng, d: usize) -> MhaParams {
        MhaParams {
            wq: Tensor::from_vec(&[d, d], rand_vec(r, d * d)).unwrap(),
            bq: rand_vec(r, d),
            wk: Tensor::from_vec(&[d, d], rand_vec(r, d * d)).unwrap(),
            bk: rand_vec(r, d),
            wv: Tensor::from_vec(&[d, d], rand_vec(r, d * d)).unwrap(),
            bv: rand_vec(r, d),
            wo: Tensor::from_vec(&[d, d], rand_vec(r, d * d)).unwrap(),
            bo: rand_vec(r, d),
        }
    }

    #[test]
    fn attention_matches_scalar_loop_reference() {
        let mut r = rng(16);
        let (n, d, heads) = (5, 8, 2);
        let x = Tensor::from_vec(&[n, d], rand_vec(&mut r, n * d)).unwrap();
        let p = random_mha_params(&mut r, d);
        let (y, _) = multi_head_attention(&x, &p, heads).unwrap();
        let want = naive_attention(&x, &p, heads);
        assert_close(y.data(), want.data(), 1e-10);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut r = rng(17);
        let x = Tensor::from_vec(&[2, 6], rand_vec(&mut r, 12)).unwrap();
        let p = random_mha_params(&mut r, 6);
        assert!(multi_head_attention(&x, &p, 4).is_err());
        assert!(multi_head_attention(&x, &p, 0).is_err());
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut r = rng(18);
        let (n, d, heads) = (4, 6, 2);
        let x = Tensor::from_vec(&[n, d], rand_vec(&mut r, n * d)).unwrap();
        let p = random_mha_params(&mut r, d);
        let dy = Tensor::from_vec(&[n, d], rand_vec(&mut r, n * d)).unwrap();

        let loss = |x: &Tensor, p: &MhaParams| -> f64 {
            let (y, _) = multi_head_attention(x, p, heads).unwrap();
            dot(y.data(), dy.data())
        };
        let (_, cache) = multi_head_attention(&x, &p, heads).unwrap();
        let g = multi_head_attention_backward(&x, &p, heads, &cache, &dy);

        let h = 1e-6;
        for idx in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            assert!(
                (num - g.dx.data()[idx]).abs() < 1e-5,
                "dx[{}]: {} vs {}",
                idx,
                num,
                g.dx.data()[idx]
            );
        }
        // Spot-check weight grads on each projection.
        let checks: [(&Tensor, &Tensor); 4] = [
            (&p.wq, &g.dwq),
            (&p.wk, &g.dwk),
            (&p.wv, &g.dwv),
            (&p.wo, &g.dwo),
        ];
        for (which, (_, grad)) in checks.iter().enumerate() {
            for idx in (0..d * d).step_by(7) {
                let mut pp = p.clone();
                let mut pm = p.clone();
                {
                    let (tp, tm): (&mut Tensor, &mut Tensor) = match which {
                        0 => (&mut pp.wq, &mut pm.wq),
                        1 => (&mut pp.wk, &mut pm.wk),
                        2 => (&mut pp.wv, &mut pm.wv),
                        _ => (&mut pp.wo, &mut pm.wo),
                    };
                    tp.data_mut()[idx] += h;
                    tm.data_mut()[idx] -= h;
                }
                let num = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
                assert!(
                    (num - grad.data()[idx]).abs() < 1e-5,
                    "w{} [{}]: {} vs {}",
                    which,
                    idx,
                    num,
                    grad.data()[idx]
                );
            }
        }
    }

    #[test]
    fn gelu_matches_direct_formula_and_gradient() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
            let want = 0.5 * x * (1.0 + u.tanh());
            assert!((gelu(x) - want).abs() < 1e-15);

            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_transpose_shape_law() {
        // (h-1)*stride - 2*pad + k for the 3x3 stride-2 pad-1 head stages.
        assert_eq!(conv_transpose_output_extent(16, 3, 2, 1).unwrap(), 31);
        assert_eq!(conv_transpose_output_extent(31, 3, 2, 1).unwrap(), 61);
        assert_eq!(conv_transpose_output_extent(8, 3, 2, 1).unwrap(), 15);
        assert_eq!(conv_transpose_output_extent(15, 3, 2, 1).unwrap(), 29);
        assert!(conv_transpose_output_extent(1, 1, 1, 3).is_err());
    }

    #[test]
    fn conv_transpose_single_pixel_identity() {
        // 1x1x1 input, 3x3 kernel of ones, stride 2, pad 1: only the kernel
        // center lands in bounds, so the output equals the input.
        let x = Tensor::from_vec(&[1, 1, 1], vec![0.37]).unwrap();
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv_transpose2d_forward(&x, &w, &[0.0], 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.data()[0] - 0.37).abs() < 1e-15);
    }

    /// Gather-style reference: for each output pixel, find contributing
    /// input pixels by inverting oy = iy*stride - pad + ky.
    fn naive_conv_transpose(
        x: &Tensor,
        w: &Tensor,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (h, wd, cin) = (x.dim(0), x.dim(1), x.dim(2));
        let (_, cout, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let oh = conv_transpose_output_extent(h, kh, stride, pad).unwrap();
        let ow = conv_transpose_output_extent(wd, kw, stride, pad).unwrap();
        let mut y = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for iy in 0..h {
                        for ix in 0..wd {
                            let ky = oy as isize - (iy as isize * stride as isize - pad as isize);
                            let kx = ox as isize - (ix as isize * stride as isize - pad as isize);
                            if ky < 0 || ky >= kh as isize || kx < 0 || kx >= kw as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[(iy * wd + ix) * cin + ci]
                                    * w.data()
                                        [((ci * cout + co) * kh + ky as usize) * kw + kx as usize];
                            }
                        }
                    }
                    y[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        Tensor::from_vec(&[oh, ow, cout], y).unwrap()
    }

    #[test]
    fn conv_transpose_matches_gather_reference() {
        let mut r = rng(19);
        let x = Tensor::from_vec(&[4, 5, 3], rand_vec(&mut r, 4 * 5 * 3)).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], rand_vec(&mut r, 3 * 2 * 9)).unwrap();
        let b = rand_vec(&mut r, 2);
        let y = conv_transpose2d_forward(&x, &w, &b, 2, 1).unwrap();
        let want = naive_conv_transpose(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), want.shape());
        assert_close(y.data(), want.data(), 1e-12);
    }

    #[test]
    fn conv_transpose_backward_matches_finite_differences() {
        let mut r = rng(20);
        let x = Tensor::from_vec(&[3, 3, 2], rand_vec(&mut r, 18)).unwrap();
        let w = Tensor::from_vec(&[2, 2, 3, 3], rand_vec(&mut r, 36)).unwrap();
        let b = rand_vec(&mut r, 2);
        let y0 = conv_transpose2d_forward(&x, &w, &b, 2, 1).unwrap();
        let dy = Tensor::from_vec(y0.shape(), rand_vec(&mut r, y0.numel())).unwrap();

        let loss = |x: &Tensor, w: &Tensor, b: &[f64]| -> f64 {
            let y = conv_transpose2d_forward(x, w, b, 2, 1).unwrap();
            dot(y.data(), dy.data())
        };
        let (dx, dw, db) = conv_transpose2d_backward(&x, &w, &dy, 2, 1);

        let h = 1e-6;
        for idx in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..w.numel() {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((num - dw.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..b.len() {
            let mut bp = b.clone();
            bp[idx] += h;
            let mut bm = b.clone();
            bm[idx] -= h;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((num - db[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_vector() {
        let (y, norm) = l2_normalize(&[3.0, 4.0], 1e-12);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((dot(&y, &y).sqrt() - 1.0).abs() < 1e-12);

        let (z, _) = l2_normalize(&[0.0, 0.0, 0.0], 1e-12);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let mut r = rng(21);
        let v = rand_vec(&mut r, 6);
        let dy = rand_vec(&mut r, 6);
        let eps = 1e-12;
        let (y, norm) = l2_normalize(&v, eps);
        let dv = l2_normalize_backward(&y, norm, eps, &dy);

        let h = 1e-7;
        for idx in 0..v.len() {
            let mut vp = v.clone();
            vp[idx] += h;
            let mut vm = v.clone();
            vm[idx] -= h;
            let fp = dot(&l2_normalize(&vp, eps).0, &dy);
            let fm = dot(&l2_normalize(&vm, eps).0, &dy);
            let num = (fp - fm) / (2.0 * h);
            assert!((num - dv[idx]).abs() < 1e-6, "{} vs {}", num, dv[idx]);
        }
        // Gradient along y itself is projected out: scaling v does not move y.
        let dv_along = l2_normalize_backward(&y, norm, eps, &y);
        assert!(dv_along.iter().all(|v| v.abs() < 1e-12));
    }
}
