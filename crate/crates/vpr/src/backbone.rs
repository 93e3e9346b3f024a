//! ViT backbone with bottleneck adapters.
//!
//! The backbone is a standard pre-norm ViT: linear patch embedding, a
//! learned class token and positional embeddings, then a stack of blocks
//!
//! ```text
//! x' = MHA(LN1(x)) + x
//! out = MLP(LN2(x')) + x'
//! ```
//!
//! followed by a final layer norm. Adaptation inserts two small bottleneck
//! MLPs per block: a serial adapter applied to the attention output with its
//! own skip (`z + up(relu(down(z)))`) and a parallel adapter beside the MLP
//! without one, scaled by a constant:
//!
//! ```text
//! out = MLP(LN2(x')) + s * up(relu(down(LN2(x')))) + x'
//! ```
//!
//! Up-projections start at zero, so a freshly adapted backbone computes
//! exactly what the plain one does; training moves it away from identity.

use crate::error::{Error, Result};
use crate::params::Gradients;
use crate::rng::{fill_normal, seeded_rng};
use crate::tensor::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    multi_head_attention, multi_head_attention_backward, relu, relu_grad, LayerNormCache,
    MhaCache, MhaParams, Tensor,
};

/// Which adapters each block carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    None,
    SerialOnly,
    ParallelOnly,
    Both,
}

impl AdapterMode {
    pub fn serial(&self) -> bool {
        matches!(self, AdapterMode::SerialOnly | AdapterMode::Both)
    }

    pub fn parallel(&self) -> bool {
        matches!(self, AdapterMode::ParallelOnly | AdapterMode::Both)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterMode::None => "none",
            AdapterMode::SerialOnly => "serial_only",
            AdapterMode::ParallelOnly => "parallel_only",
            AdapterMode::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<AdapterMode> {
        match s {
            "none" => Ok(AdapterMode::None),
            "serial_only" => Ok(AdapterMode::SerialOnly),
            "parallel_only" => Ok(AdapterMode::ParallelOnly),
            "both" => Ok(AdapterMode::Both),
            other => Err(Error::invalid(format!("unknown adapter mode '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub adapter_mode: AdapterMode,
    /// Adapter bottleneck width as a fraction of the embed dim.
    pub bottleneck_ratio: f64,
    /// Scale applied to the parallel adapter branch.
    pub adapter_scale: f64,
    pub ln_eps: f64,
}

impl BackboneConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk() -> BackboneConfig {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            adapter_mode: AdapterMode::Both,
            bottleneck_ratio: 0.5,
            adapter_scale: 0.2,
            ln_eps: 1e-6,
        }
    }

    /// ViT-L/14 geometry at 224x224 input.
    pub fn vit_large() -> BackboneConfig {
        BackboneConfig {
            image_size: 224,
            patch_size: 14,
            embed_dim: 1024,
            num_blocks: 24,
            num_heads: 16,
            adapter_mode: AdapterMode::Both,
            bottleneck_ratio: 0.5,
            adapter_scale: 0.2,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(Error::invalid("image and patch size must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::invalid("backbone needs at least one block"));
        }
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio <= 1.0) {
            return Err(Error::invalid("bottleneck ratio must be in (0, 1]"));
        }
        if !self.adapter_scale.is_finite() || self.adapter_scale < 0.0 {
            return Err(Error::invalid("adapter scale must be finite and >= 0"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("layer norm eps must be positive"));
        }
        Ok(())
    }

    /// Patch grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Adapter bottleneck width: round(ratio * D), at least 1.
    pub fn adapter_hidden(&self) -> usize {
        ((self.bottleneck_ratio * self.embed_dim as f64).round() as usize).max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    /// (in, out)
    pub w: Tensor,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Down projection into the bottleneck, up projection back out.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub down: LinearParams,
    pub up: LinearParams,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: MhaParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    /// Adapter applied serially to the attention output.
    pub serial: Option<AdapterParams>,
    /// Adapter applied in parallel with the MLP.
    pub parallel: Option<AdapterParams>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch: LinearParams,
    pub cls: Vec<f64>,
    /// (tokens, D) learned positional embeddings.
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
}

fn xavier_linear(rng_seed: u64, label: &str, fan_in: usize, fan_out: usize) -> LinearParams {
    let mut rng = seeded_rng(rng_seed, label);
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let mut w = Tensor::zeros(&[fan_in, fan_out]);
    fill_normal(&mut rng, w.data_mut(), std);
    LinearParams {
        w,
        b: vec![0.0; fan_out],
    }
}

fn unit_layer_norm(d: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: vec![1.0; d],
        beta: vec![0.0; d],
    }
}

/// Adapter init: small random down projection, zero up projection. The zero
/// up-projection makes the whole adapter an exact no-op at initialization.
fn init_adapter(seed: u64, label: &str, d: usize, hidden: usize) -> AdapterParams {
    let down = xavier_linear(seed, &format!("{label}.down"), d, hidden);
    let up = LinearParams {
        w: Tensor::zeros(&[hidden, d]),
        b: vec![0.0; d],
    };
    AdapterParams { down, up }
}

impl BackboneParams {
    /// Seeded initialization. Base weights are drawn from streams that do
    /// not depend on the adapter mode, so two configs differing only in
    /// adapter placement share identical backbone weights.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = cfg.adapter_hidden();
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;

        let patch = xavier_linear(seed, "patch", patch_dim, d);
        let mut cls = vec![0.0; d];
        fill_normal(&mut seeded_rng(seed, "cls"), &mut cls, 0.02);
        let mut pos = Tensor::zeros(&[cfg.tokens(), d]);
        fill_normal(&mut seeded_rng(seed, "pos"), pos.data_mut(), 0.02);

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let attn = MhaParams {
                wq: xavier_linear(seed, &format!("block{i}.attn.q"), d, d).w,
                bq: vec![0.0; d],
                wk: xavier_linear(seed, &format!("block{i}.attn.k"), d, d).w,
                bk: vec![0.0; d],
                wv: xavier_linear(seed, &format!("block{i}.attn.v"), d, d).w,
                bv: vec![0.0; d],
                wo: xavier_linear(seed, &format!("block{i}.attn.o"), d, d).w,
                bo: vec![0.0; d],
            };
            let serial = cfg
                .adapter_mode
                .serial()
                .then(|| init_adapter(seed, &format!("block{i}.ad1"), d, hidden));
            let parallel = cfg
                .adapter_mode
                .parallel()
                .then(|| init_adapter(seed, &format!("block{i}.ad2"), d, hidden));
            blocks.push(BlockParams {
                ln1: unit_layer_norm(d),
                attn,
                ln2: unit_layer_norm(d),
                fc1: xavier_linear(seed, &format!("block{i}.fc1"), d, cfg.mlp_hidden()),
                fc2: xavier_linear(seed, &format!("block{i}.fc2"), cfg.mlp_hidden(), d),
                serial,
                parallel,
            });
        }
        Ok(BackboneParams {
            patch,
            cls,
            pos,
            blocks,
            final_ln: unit_layer_norm(d),
        })
    }
}

fn map_relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = relu(*v);
    }
    y
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Flattens each p x p x 3 patch (row-major y, x, channel) into a row of the
/// returned (num_patches, 3p^2) matrix. Patches are ordered row-major over
/// the patch grid.
pub fn image_to_patches(img: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    if img.shape() != [cfg.image_size, cfg.image_size, 3] {
        return Err(Error::shape(format!(
            "expected {0}x{0}x3 image, got {1:?}",
            cfg.image_size,
            img.shape()
        )));
    }
    let ps = cfg.patch_size;
    let g = cfg.grid();
    let pd = 3 * ps * ps;
    let mut patches = Tensor::zeros(&[g * g, pd]);
    let src = img.data();
    let dst = patches.data_mut();
    for py in 0..g {
        for px in 0..g {
            let row = (py * g + px) * pd;
            for dy in 0..ps {
                let src_off = ((py * ps + dy) * cfg.image_size + px * ps) * 3;
                let dst_off = row + dy * ps * 3;
                dst[dst_off..dst_off + ps * 3].copy_from_slice(&src[src_off..src_off + ps * 3]);
            }
        }
    }
    Ok(patches)
}

/// Patch embedding: linear projection of flattened patches. Returns the
/// (num_patches, D) patch tokens.
pub fn patch_embed(img: &Tensor, patch: &LinearParams, cfg: &BackboneConfig) -> Result<Tensor> {
    let patches = image_to_patches(img, cfg)?;
    Ok(linear_forward(&patches, &patch.w, &patch.b))
}

/// Class token prepended, positional embeddings added.
fn assemble_tokens(patch_tokens: &Tensor, p: &BackboneParams) -> Tensor {
    let (n, d) = (patch_tokens.dim(0), patch_tokens.dim(1));
    let mut tokens = Tensor::zeros(&[n + 1, d]);
    tokens.data_mut()[..d].copy_from_slice(&p.cls);
    tokens.data_mut()[d..].copy_from_slice(patch_tokens.data());
    tokens.add_assign(&p.pos);
    tokens
}

/// Everything the backward pass needs from one block's forward run.
#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    ln1: LayerNormCache,
    a: Tensor,
    mha: MhaCache,
    mh: Tensor,
    /// Serial adapter bottleneck pre-activation.
    serial_pre: Option<Tensor>,
    xprime: Tensor,
    ln2: LayerNormCache,
    b: Tensor,
    /// MLP hidden pre-activation.
    fc1_pre: Tensor,
    /// Parallel adapter bottleneck pre-activation.
    parallel_pre: Option<Tensor>,
}

impl BlockCache {
    /// ReLU activation patterns of the adapter bottlenecks, for kink
    /// detection during gradient checking.
    pub fn relu_masks(&self) -> Vec<Vec<bool>> {
        let mut masks = Vec::new();
        for pre in [&self.serial_pre, &self.parallel_pre].into_iter().flatten() {
            masks.push(pre.data().iter().map(|v| *v > 0.0).collect());
        }
        masks
    }
}

/// Plain ViT block without any adapter, regardless of what the params carry.
pub fn block_forward(x: &Tensor, p: &BlockParams, heads: usize, ln_eps: f64) -> Result<Tensor> {
    let (a, _) = layer_norm_forward(x, &p.ln1.gamma, &p.ln1.beta, ln_eps);
    let (mh, _) = multi_head_attention(&a, &p.attn, heads)?;
    let xprime = add_tensors(&mh, x);
    let (b, _) = layer_norm_forward(&xprime, &p.ln2.gamma, &p.ln2.beta, ln_eps);
    let mut h = linear_forward(&b, &p.fc1.w, &p.fc1.b);
    for v in h.data_mut() {
        *v = gelu(*v);
    }
    let f = linear_forward(&h, &p.fc2.w, &p.fc2.b);
    Ok(add_tensors(&f, &xprime))
}

/// Block with whichever adapters the params carry. `scale` multiplies the
/// parallel branch only; the serial adapter has its own internal skip.
pub fn adapted_block_forward(
    x: &Tensor,
    p: &BlockParams,
    heads: usize,
    ln_eps: f64,
    scale: f64,
) -> Result<Tensor> {
    Ok(adapted_block_forward_cached(x, p, heads, ln_eps, scale)?.0)
}

pub fn adapted_block_forward_cached(
    x: &Tensor,
    p: &BlockParams,
    heads: usize,
    ln_eps: f64,
    scale: f64,
) -> Result<(Tensor, BlockCache)> {
    let (a, ln1) = layer_norm_forward(x, &p.ln1.gamma, &p.ln1.beta, ln_eps);
    let (mh, mha) = multi_head_attention(&a, &p.attn, heads)?;

    let mut serial_pre = None;
    let t = if let Some(ad) = &p.serial {
        let pre = linear_forward(&mh, &ad.down.w, &ad.down.b);
        let up = linear_forward(&map_relu(&pre), &ad.up.w, &ad.up.b);
        serial_pre = Some(pre);
        add_tensors(&mh, &up)
    } else {
        mh.clone()
    };
    let xprime = add_tensors(&t, x);

    let (b, ln2) = layer_norm_forward(&xprime, &p.ln2.gamma, &p.ln2.beta, ln_eps);
    let fc1_pre = linear_forward(&b, &p.fc1.w, &p.fc1.b);
    let mut h = fc1_pre.clone();
    for v in h.data_mut() {
        *v = gelu(*v);
    }
    let f = linear_forward(&h, &p.fc2.w, &p.fc2.b);

    let mut out = add_tensors(&f, &xprime);
    let mut parallel_pre = None;
    if let Some(ad) = &p.parallel {
        let pre = linear_forward(&b, &ad.down.w, &ad.down.b);
        let up = linear_forward(&map_relu(&pre), &ad.up.w, &ad.up.b);
        parallel_pre = Some(pre);
        let od = out.data_mut();
        for (o, u) in od.iter_mut().zip(up.data()) {
            *o += scale * u;
        }
    }

    let cache = BlockCache {
        x: x.clone(),
        ln1,
        a,
        mha,
        mh,
        serial_pre,
        xprime,
        ln2,
        b,
        fc1_pre,
        parallel_pre,
    };
    Ok((out, cache))
}

fn adapter_backward(
    ad: &AdapterParams,
    input: &Tensor,
    pre: &Tensor,
    d_out: &Tensor,
    grads: &mut Gradients,
    prefix: &str,
) -> Tensor {
    let rpre = map_relu(pre);
    let (d_rpre, dwu, dbu) = linear_backward(&rpre, &ad.up.w, d_out);
    let mut d_pre = d_rpre;
    for (g, z) in d_pre.data_mut().iter_mut().zip(pre.data()) {
        *g *= relu_grad(*z);
    }
    let (d_in, dwd, dbd) = linear_backward(input, &ad.down.w, &d_pre);
    grads.add(&format!("{prefix}.up.w"), dwu.data());
    grads.add(&format!("{prefix}.up.b"), &dbu);
    grads.add(&format!("{prefix}.down.w"), dwd.data());
    grads.add(&format!("{prefix}.down.b"), &dbd);
    d_in
}

/// Backward through one adapted block. Returns d(input); parameter grads are
/// accumulated under `prefix`.
pub fn adapted_block_backward(
    p: &BlockParams,
    heads: usize,
    scale: f64,
    cache: &BlockCache,
    dy: &Tensor,
    grads: &mut Gradients,
    prefix: &str,
) -> Tensor {
    // out = f + scale * parallel(b) + x'
    let d_f = dy;
    let mut d_b = Tensor::zeros(cache.b.shape());
    let mut d_xprime = dy.clone();

    if let Some(ad) = &p.parallel {
        let mut d_par = dy.clone();
        d_par.scale(scale);
        let d_b_par = adapter_backward(
            ad,
            &cache.b,
            cache.parallel_pre.as_ref().unwrap(),
            &d_par,
            grads,
            &format!("{prefix}.ad2"),
        );
        d_b.add_assign(&d_b_par);
    }

    // MLP: f = fc2(gelu(fc1(b)))
    let mut h = cache.fc1_pre.clone();
    for v in h.data_mut() {
        *v = gelu(*v);
    }
    let (d_h, dw2, db2) = linear_backward(&h, &p.fc2.w, d_f);
    let mut d_fc1_pre = d_h;
    for (g, z) in d_fc1_pre.data_mut().iter_mut().zip(cache.fc1_pre.data()) {
        *g *= gelu_grad(*z);
    }
    let (d_b_mlp, dw1, db1) = linear_backward(&cache.b, &p.fc1.w, &d_fc1_pre);
    d_b.add_assign(&d_b_mlp);
    grads.add(&format!("{prefix}.fc2.w"), dw2.data());
    grads.add(&format!("{prefix}.fc2.b"), &db2);
    grads.add(&format!("{prefix}.fc1.w"), dw1.data());
    grads.add(&format!("{prefix}.fc1.b"), &db1);

    // b = LN2(x')
    let (d_xprime_ln, dg2, dbeta2) = layer_norm_backward(&cache.xprime, &p.ln2.gamma, &cache.ln2, &d_b);
    d_xprime.add_assign(&d_xprime_ln);
    grads.add(&format!("{prefix}.ln2.g"), &dg2);
    grads.add(&format!("{prefix}.ln2.b"), &dbeta2);

    // x' = t + x, t = mh (+ serial(mh))
    let d_t = &d_xprime;
    let mut d_x = d_xprime.clone();
    let mut d_mh = d_t.clone();
    if let Some(ad) = &p.serial {
        let d_mh_ad = adapter_backward(
            ad,
            &cache.mh,
            cache.serial_pre.as_ref().unwrap(),
            d_t,
            grads,
            &format!("{prefix}.ad1"),
        );
        d_mh.add_assign(&d_mh_ad);
    }

    let mha_grads = multi_head_attention_backward(&cache.a, &p.attn, heads, &cache.mha, &d_mh);
    grads.add(&format!("{prefix}.attn.wq"), mha_grads.dwq.data());
    grads.add(&format!("{prefix}.attn.bq"), &mha_grads.dbq);
    grads.add(&format!("{prefix}.attn.wk"), mha_grads.dwk.data());
    grads.add(&format!("{prefix}.attn.bk"), &mha_grads.dbk);
    grads.add(&format!("{prefix}.attn.wv"), mha_grads.dwv.data());
    grads.add(&format!("{prefix}.attn.bv"), &mha_grads.dbv);
    grads.add(&format!("{prefix}.attn.wo"), mha_grads.dwo.data());
    grads.add(&format!("{prefix}.attn.bo"), &mha_grads.dbo);

    let (d_x_ln, dg1, dbeta1) = layer_norm_backward(&cache.x, &p.ln1.gamma, &cache.ln1, &mha_grads.dx);
    d_x.add_assign(&d_x_ln);
    grads.add(&format!("{prefix}.ln1.g"), &dg1);
    grads.add(&format!("{prefix}.ln1.b"), &dbeta1);

    d_x
}

/// Final feature map (grid x grid x D) plus the post-LN class token.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub feature_map: Tensor,
    pub class_token: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    patches: Tensor,
    blocks: Vec<BlockCache>,
    pre_final: Tensor,
    final_ln: LayerNormCache,
}

impl BackboneCache {
    pub fn relu_masks(&self) -> Vec<Vec<bool>> {
        self.blocks.iter().flat_map(|b| b.relu_masks()).collect()
    }
}

fn split_tokens(tokens: &Tensor, cfg: &BackboneConfig) -> BackboneOutput {
    let d = cfg.embed_dim;
    let g = cfg.grid();
    let class_token = tokens.data()[..d].to_vec();
    let fm = Tensor::from_vec(&[g, g, d], tokens.data()[d..].to_vec()).unwrap();
    BackboneOutput {
        feature_map: fm,
        class_token,
    }
}

/// Full backbone forward without caching; adapter application follows the
/// params (blocks created under `AdapterMode::None` simply have none).
pub fn backbone_forward(img: &Tensor, p: &BackboneParams, cfg: &BackboneConfig) -> Result<BackboneOutput> {
    let patch_tokens = patch_embed(img, &p.patch, cfg)?;
    let mut x = assemble_tokens(&patch_tokens, p);
    for blk in &p.blocks {
        x = adapted_block_forward(&x, blk, cfg.num_heads, cfg.ln_eps, cfg.adapter_scale)?;
    }
    let (y, _) = layer_norm_forward(&x, &p.final_ln.gamma, &p.final_ln.beta, cfg.ln_eps);
    Ok(split_tokens(&y, cfg))
}

pub fn backbone_forward_cached(
    img: &Tensor,
    p: &BackboneParams,
    cfg: &BackboneConfig,
) -> Result<(BackboneOutput, BackboneCache)> {
    let patches = image_to_patches(img, cfg)?;
    let patch_tokens = linear_forward(&patches, &p.patch.w, &p.patch.b);
    let mut x = assemble_tokens(&patch_tokens, p);
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for blk in &p.blocks {
        let (next, cache) =
            adapted_block_forward_cached(&x, blk, cfg.num_heads, cfg.ln_eps, cfg.adapter_scale)?;
        blocks.push(cache);
        x = next;
    }
    let (y, final_ln) = layer_norm_forward(&x, &p.final_ln.gamma, &p.final_ln.beta, cfg.ln_eps);
    let out = split_tokens(&y, cfg);
    Ok((
        out,
        BackboneCache {
            patches,
            blocks,
            pre_final: x,
            final_ln,
        },
    ))
}

/// Backward from gradients on the feature map and class token into every
/// backbone parameter.
pub fn backbone_backward(
    p: &BackboneParams,
    cfg: &BackboneConfig,
    cache: &BackboneCache,
    d_fm: &Tensor,
    d_cls: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let d = cfg.embed_dim;
    let n = cfg.tokens();
    let mut d_tokens = Tensor::zeros(&[n, d]);
    d_tokens.data_mut()[..d].copy_from_slice(d_cls);
    d_tokens.data_mut()[d..].copy_from_slice(d_fm.data());

    let (mut d_x, dg, dbeta) =
        layer_norm_backward(&cache.pre_final, &p.final_ln.gamma, &cache.final_ln, &d_tokens);
    grads.add("final_ln.g", &dg);
    grads.add("final_ln.b", &dbeta);

    for (i, (blk, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        d_x = adapted_block_backward(
            blk,
            cfg.num_heads,
            cfg.adapter_scale,
            bc,
            &d_x,
            grads,
            &format!("block{i}"),
        );
    }

    // tokens0 = [cls; patches * W + b] + pos
    grads.add("pos", d_x.data());
    grads.add("cls", &d_x.data()[..d]);
    let d_patch_rows = Tensor::from_vec(&[n - 1, d], d_x.data()[d..].to_vec()).unwrap();
    let (_, dw, db) = linear_backward(&cache.patches, &p.patch.w, &d_patch_rows);
    grads.add("patch.w", dw.data());
    grads.add("patch.b", &db);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            adapter_mode: AdapterMode::Both,
            bottleneck_ratio: 0.5,
            adapter_scale: 0.2,
            ln_eps: 1e-6,
        }
    }

    fn random_image(cfg: &BackboneConfig, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Tensor::zeros(&[cfg.image_size, cfg.image_size, 3]);
        for v in img.data_mut() {
            *v = r.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = BackboneConfig::desk();
        assert!(c.validate().is_ok());
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.num_blocks = 0;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.bottleneck_ratio = 0.0;
        assert!(c.validate().is_err());
        c.bottleneck_ratio = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adapter_hidden_tracks_ratio() {
        assert_eq!(BackboneConfig::desk().adapter_hidden(), 32);
        let mut large = BackboneConfig::vit_large();
        assert_eq!(large.adapter_hidden(), 512);
        large.bottleneck_ratio = 0.25;
        assert_eq!(large.adapter_hidden(), 256);
        large.bottleneck_ratio = 0.75;
        assert_eq!(large.adapter_hidden(), 768);
    }

    #[test]
    fn token_counts_include_class_token() {
        assert_eq!(BackboneConfig::desk().tokens(), 65);
        assert_eq!(BackboneConfig::desk().grid(), 8);
        assert_eq!(BackboneConfig::vit_large().tokens(), 257);
        assert_eq!(BackboneConfig::vit_large().grid(), 16);
    }

    #[test]
    fn patch_order_is_row_major_and_reshape_matches() {
        // Selector weight: output channel 0 copies the patch's top-left red
        // value, so fm[y][x][0] must equal that pixel of patch (y, x).
        let cfg = tiny_config();
        let mut p = BackboneParams::init(&cfg, 3).unwrap();
        let img = random_image(&cfg, 4);

        let mut w = Tensor::zeros(&[3 * 16, cfg.embed_dim]);
        w.data_mut()[0] = 1.0; // input 0 = (dy=0, dx=0, red) -> channel 0
        p.patch = LinearParams {
            w,
            b: vec![0.0; cfg.embed_dim],
        };
        let tokens = patch_embed(&img, &p.patch, &cfg).unwrap();
        let g = cfg.grid();
        for py in 0..g {
            for px in 0..g {
                let want = img.data()[((py * 4) * cfg.image_size + px * 4) * 3];
                let got = tokens.data()[(py * g + px) * cfg.embed_dim];
                assert!((want - got).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_init_adapters_leave_outputs_unchanged() {
        let cfg_both = BackboneConfig::desk();
        let mut cfg_none = BackboneConfig::desk();
        cfg_none.adapter_mode = AdapterMode::None;

        let p_both = BackboneParams::init(&cfg_both, 91).unwrap();
        let p_none = BackboneParams::init(&cfg_none, 91).unwrap();
        // Base weight streams are adapter-independent.
        assert_eq!(p_both.blocks[0].attn.wq.data(), p_none.blocks[0].attn.wq.data());

        for i in 0..10 {
            let img = random_image(&cfg_both, 100 + i);
            let a = backbone_forward(&img, &p_both, &cfg_both).unwrap();
            let b = backbone_forward(&img, &p_none, &cfg_none).unwrap();
            let max_diff = a
                .feature_map
                .data()
                .iter()
                .zip(b.feature_map.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert_eq!(max_diff, 0.0, "image {}", i);
            assert_eq!(a.class_token, b.class_token);
        }
    }

    #[test]
    fn plain_block_ignores_adapters() {
        let cfg = tiny_config();
        let mut p = BackboneParams::init(&cfg, 5).unwrap();
        // Give the adapters real weight so the adapted path differs.
        if let Some(ad) = &mut p.blocks[0].serial {
            for v in ad.up.w.data_mut() {
                *v = 0.3;
            }
        }
        let x = Tensor::from_vec(
            &[cfg.tokens(), cfg.embed_dim],
            (0..cfg.tokens() * cfg.embed_dim)
                .map(|i| (i as f64 * 0.37).sin())
                .collect(),
        )
        .unwrap();
        let plain = block_forward(&x, &p.blocks[0], cfg.num_heads, cfg.ln_eps).unwrap();
        let adapted =
            adapted_block_forward(&x, &p.blocks[0], cfg.num_heads, cfg.ln_eps, cfg.adapter_scale)
                .unwrap();
        let diff: f64 = plain
            .data()
            .iter()
            .zip(adapted.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "adapted path should differ once adapters are nonzero");

        let mut stripped = p.blocks[0].clone();
        stripped.serial = None;
        stripped.parallel = None;
        let adapted_none =
            adapted_block_forward(&x, &stripped, cfg.num_heads, cfg.ln_eps, cfg.adapter_scale)
                .unwrap();
        assert_eq!(plain.data(), adapted_none.data());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = BackboneConfig::desk();
        let a = BackboneParams::init(&cfg, 7).unwrap();
        let b = BackboneParams::init(&cfg, 7).unwrap();
        let c = BackboneParams::init(&cfg, 8).unwrap();
        assert_eq!(a.patch.w.data(), b.patch.w.data());
        assert_eq!(a.pos.data(), b.pos.data());
        assert_ne!(a.patch.w.data(), c.patch.w.data());
    }

    /// Randomizes adapter up-projections so adapter gradients are nonzero.
    fn wake_adapters(p: &mut BackboneParams, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for blk in &mut p.blocks {
            for ad in [blk.serial.as_mut(), blk.parallel.as_mut()].into_iter().flatten() {
                for v in ad.up.w.data_mut() {
                    *v = r.gen_range(-0.3..0.3);
                }
                for v in &mut ad.up.b {
                    *v = r.gen_range(-0.1..0.1);
                }
            }
        }
    }

    #[test]
    fn backbone_backward_matches_finite_differences() {
        let cfg = tiny_config();
        let mut p = BackboneParams::init(&cfg, 11).unwrap();
        wake_adapters(&mut p, 12);
        let img = random_image(&cfg, 13);

        let mut r = ChaCha8Rng::seed_from_u64(14);
        let g = cfg.grid();
        let d_fm = Tensor::from_vec(
            &[g, g, cfg.embed_dim],
            (0..g * g * cfg.embed_dim)
                .map(|_| r.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let d_cls: Vec<f64> = (0..cfg.embed_dim).map(|_| r.gen_range(-1.0..1.0)).collect();

        let loss = |p: &BackboneParams| -> f64 {
            let out = backbone_forward(&img, p, &cfg).unwrap();
            dot(out.feature_map.data(), d_fm.data()) + dot(&out.class_token, &d_cls)
        };

        let (_, cache) = backbone_forward_cached(&img, &p, &cfg).unwrap();
        let mut grads = Gradients::new();
        backbone_backward(&p, &cfg, &cache, &d_fm, &d_cls, &mut grads).unwrap();

        let h = 1e-6;
        let tol = 1e-4;
        // One closure per parameter site we want to probe.
        let check = |name: &str, write: &mut dyn FnMut(&mut BackboneParams, usize, f64), len: usize| {
            let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {}", name));
            assert_eq!(g.len(), len, "grad length for {}", name);
            let step = (len / 7).max(1);
            for idx in (0..len).step_by(step) {
                let mut pp = p.clone();
                write(&mut pp, idx, h);
                let mut pm = p.clone();
                write(&mut pm, idx, -h);
                let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
                assert!(
                    (num - g[idx]).abs() < tol,
                    "{}[{}]: fd {} vs analytic {}",
                    name,
                    idx,
                    num,
                    g[idx]
                );
            }
        };

        let d = cfg.embed_dim;
        let hid = cfg.adapter_hidden();
        let mlp = cfg.mlp_hidden();
        check("patch.w", &mut |p, i, h| p.patch.w.data_mut()[i] += h, 48 * d);
        check("patch.b", &mut |p, i, h| p.patch.b[i] += h, d);
        check("cls", &mut |p, i, h| p.cls[i] += h, d);
        check("pos", &mut |p, i, h| p.pos.data_mut()[i] += h, cfg.tokens() * d);
        check("block0.ln1.g", &mut |p, i, h| p.blocks[0].ln1.gamma[i] += h, d);
        check("block0.ln1.b", &mut |p, i, h| p.blocks[0].ln1.beta[i] += h, d);
        check("block1.ln2.g", &mut |p, i, h| p.blocks[1].ln2.gamma[i] += h, d);
        check("block0.attn.wq", &mut |p, i, h| p.blocks[0].attn.wq.data_mut()[i] += h, d * d);
        check("block1.attn.wo", &mut |p, i, h| p.blocks[1].attn.wo.data_mut()[i] += h, d * d);
        check("block0.attn.bv", &mut |p, i, h| p.blocks[0].attn.bv[i] += h, d);
        check("block0.fc1.w", &mut |p, i, h| p.blocks[0].fc1.w.data_mut()[i] += h, d * mlp);
        check("block1.fc2.w", &mut |p, i, h| p.blocks[1].fc2.w.data_mut()[i] += h, mlp * d);
        check("block0.ad1.down.w", &mut |p, i, h| {
            p.blocks[0].serial.as_mut().unwrap().down.w.data_mut()[i] += h
        }, d * hid);
        check("block0.ad1.up.w", &mut |p, i, h| {
            p.blocks[0].serial.as_mut().unwrap().up.w.data_mut()[i] += h
        }, hid * d);
        check("block1.ad2.down.w", &mut |p, i, h| {
            p.blocks[1].parallel.as_mut().unwrap().down.w.data_mut()[i] += h
        }, d * hid);
        check("block1.ad2.up.b", &mut |p, i, h| {
            p.blocks[1].parallel.as_mut().unwrap().up.b[i] += h
        }, d);
        check("final_ln.g", &mut |p, i, h| p.final_ln.gamma[i] += h, d);
    }
}
