//! The full extraction model: adapted backbone, global head, local head and
//! the GeM exponent, plus named parameter traversal and the binary
//! checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{
    backbone_backward, backbone_forward, backbone_forward_cached, AdapterMode, BackboneCache,
    BackboneConfig, BackboneOutput, BackboneParams,
};
use crate::error::{Error, Result};
use crate::grid::LocalFeatureGrid;
use crate::heads::{
    global_feature, global_feature_backward, local_adaptation_backward, local_adaptation_cached,
    GlobalCache, GlobalMode, LocalHeadCache, LocalHeadParams,
};
use crate::params::{Gradients, ParamGroup};
use crate::rng::{fill_normal, seeded_rng};
use crate::tensor::Tensor;
use crate::wire;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVWT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_CONTEXT: &str = "checkpoint";

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_mid_channels: usize,
    pub head_out_channels: usize,
    pub global_mode: GlobalMode,
    pub gem_p_init: f64,
    pub gem_p_learnable: bool,
    pub gem_eps: f64,
}

impl ModelConfig {
    pub fn desk() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            head_mid_channels: 32,
            head_out_channels: 16,
            global_mode: GlobalMode::Gem,
            gem_p_init: 3.0,
            gem_p_learnable: false,
            gem_eps: crate::heads::GEM_CLAMP_EPS,
        }
    }

    pub fn vit_large() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::vit_large(),
            head_mid_channels: 256,
            head_out_channels: 128,
            global_mode: GlobalMode::Gem,
            gem_p_init: 3.0,
            gem_p_learnable: false,
            gem_eps: crate::heads::GEM_CLAMP_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_mid_channels == 0 || self.head_out_channels == 0 {
            return Err(Error::invalid("local head channel counts must be positive"));
        }
        if !(self.gem_p_init >= 1.0) {
            return Err(Error::invalid("GeM power must be >= 1"));
        }
        if !(self.gem_eps > 0.0) {
            return Err(Error::invalid("GeM clamp eps must be positive"));
        }
        Ok(())
    }

    /// Side length of the dense local grid this config produces.
    pub fn local_grid_side(&self) -> Result<usize> {
        crate::heads::local_grid_extent(self.backbone.grid())
    }

    /// Dimension of the global descriptor.
    pub fn global_dim(&self) -> usize {
        self.backbone.embed_dim
    }
}

/// Features extracted from one image.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// Unit-norm global descriptor.
    pub global: Vec<f64>,
    /// Dense local feature grid, unit norm per location.
    pub local: LocalFeatureGrid,
    /// Raw backbone patch tokens as a grid, for the coarse matching mode.
    pub patches: LocalFeatureGrid,
    pub class_token: Vec<f64>,
}

#[derive(Debug)]
pub struct ModelCache {
    pub backbone_out: BackboneOutput,
    pub backbone: BackboneCache,
    pub global: GlobalCache,
    pub head: LocalHeadCache,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub head: LocalHeadParams,
    pub gem_p: f64,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let backbone = BackboneParams::init(&config.backbone, seed)?;
        let head = LocalHeadParams::init(
            config.backbone.embed_dim,
            config.head_mid_channels,
            config.head_out_channels,
            seed,
        );
        Ok(Model {
            gem_p: config.gem_p_init,
            config,
            backbone,
            head,
        })
    }

    /// Fills every adapter up-projection with random values. Fresh adapters
    /// are exact no-ops, which also zeroes the gradients into their
    /// down-projections; gradient checks and untrained-baseline comparisons
    /// call this to open those paths without training.
    pub fn randomize_adapters(&mut self, seed: u64, std: f64) {
        for (i, blk) in self.backbone.blocks.iter_mut().enumerate() {
            for (slot, adapter) in [&mut blk.serial, &mut blk.parallel].into_iter().enumerate() {
                if let Some(ad) = adapter {
                    let mut rng = seeded_rng(seed, &format!("wake.block{i}.ad{slot}"));
                    fill_normal(&mut rng, ad.up.w.data_mut(), std);
                    fill_normal(&mut rng, &mut ad.up.b, std);
                }
            }
        }
    }

    pub fn extract(&self, img: &Tensor) -> Result<ImageFeatures> {
        let out = backbone_forward(img, &self.backbone, &self.config.backbone)?;
        self.features_from_output(&out)
    }

    /// Global descriptor only; skips the local head. Used for mining and
    /// candidate retrieval where grids are not needed.
    pub fn extract_global(&self, img: &Tensor) -> Result<Vec<f64>> {
        let out = backbone_forward(img, &self.backbone, &self.config.backbone)?;
        let (g, _) = global_feature(&out, self.config.global_mode, self.gem_p, self.config.gem_eps)?;
        Ok(g)
    }

    fn features_from_output(&self, out: &BackboneOutput) -> Result<ImageFeatures> {
        let (global, _) =
            global_feature(out, self.config.global_mode, self.gem_p, self.config.gem_eps)?;
        let local = crate::heads::local_adaptation(&out.feature_map, &self.head)?;
        let patches = LocalFeatureGrid::from_tensor(&out.feature_map)?;
        Ok(ImageFeatures {
            global,
            local,
            patches,
            class_token: out.class_token.clone(),
        })
    }

    pub fn forward_cached(&self, img: &Tensor) -> Result<(ImageFeatures, ModelCache)> {
        let (out, bcache) = backbone_forward_cached(img, &self.backbone, &self.config.backbone)?;
        let (global, gcache) =
            global_feature(&out, self.config.global_mode, self.gem_p, self.config.gem_eps)?;
        let (local, hcache) = local_adaptation_cached(&out.feature_map, &self.head)?;
        let patches = LocalFeatureGrid::from_tensor(&out.feature_map)?;
        let features = ImageFeatures {
            global,
            local,
            patches,
            class_token: out.class_token.clone(),
        };
        Ok((
            features,
            ModelCache {
                backbone_out: out,
                backbone: bcache,
                global: gcache,
                head: hcache,
            },
        ))
    }

    /// Accumulates parameter gradients for one image given gradients on its
    /// global descriptor and local grid. `features` must come from the same
    /// `forward_cached` call as `cache`.
    pub fn backward(
        &self,
        features: &ImageFeatures,
        cache: &ModelCache,
        d_global: &[f64],
        d_local: &LocalFeatureGrid,
        grads: &mut Gradients,
    ) -> Result<()> {
        let mut d_fm = local_adaptation_backward(
            &cache.backbone_out.feature_map,
            &self.head,
            &cache.head,
            &features.local,
            d_local,
            grads,
        )?;
        let (d_fm_global, d_cls, dp) = global_feature_backward(
            &cache.backbone_out,
            self.config.global_mode,
            self.gem_p,
            self.config.gem_eps,
            &cache.global,
            d_global,
        );
        d_fm.add_assign(&d_fm_global);
        grads.add_scalar("gem.p", dp);
        backbone_backward(
            &self.backbone,
            &self.config.backbone,
            &cache.backbone,
            &d_fm,
            &d_cls,
            grads,
        )
    }

    /// Visits every parameter in a fixed canonical order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, ParamGroup, &[usize], &[f64])) {
        let b = &self.backbone;
        f("patch.w", ParamGroup::Backbone, b.patch.w.shape(), b.patch.w.data());
        f("patch.b", ParamGroup::Backbone, &[b.patch.b.len()], &b.patch.b);
        f("cls", ParamGroup::Backbone, &[b.cls.len()], &b.cls);
        f("pos", ParamGroup::Backbone, b.pos.shape(), b.pos.data());
        for (i, blk) in b.blocks.iter().enumerate() {
            let p = |suffix: &str| format!("block{i}.{suffix}");
            f(&p("ln1.g"), ParamGroup::Backbone, &[blk.ln1.gamma.len()], &blk.ln1.gamma);
            f(&p("ln1.b"), ParamGroup::Backbone, &[blk.ln1.beta.len()], &blk.ln1.beta);
            f(&p("attn.wq"), ParamGroup::Backbone, blk.attn.wq.shape(), blk.attn.wq.data());
            f(&p("attn.bq"), ParamGroup::Backbone, &[blk.attn.bq.len()], &blk.attn.bq);
            f(&p("attn.wk"), ParamGroup::Backbone, blk.attn.wk.shape(), blk.attn.wk.data());
            f(&p("attn.bk"), ParamGroup::Backbone, &[blk.attn.bk.len()], &blk.attn.bk);
            f(&p("attn.wv"), ParamGroup::Backbone, blk.attn.wv.shape(), blk.attn.wv.data());
            f(&p("attn.bv"), ParamGroup::Backbone, &[blk.attn.bv.len()], &blk.attn.bv);
            f(&p("attn.wo"), ParamGroup::Backbone, blk.attn.wo.shape(), blk.attn.wo.data());
            f(&p("attn.bo"), ParamGroup::Backbone, &[blk.attn.bo.len()], &blk.attn.bo);
            f(&p("ln2.g"), ParamGroup::Backbone, &[blk.ln2.gamma.len()], &blk.ln2.gamma);
            f(&p("ln2.b"), ParamGroup::Backbone, &[blk.ln2.beta.len()], &blk.ln2.beta);
            f(&p("fc1.w"), ParamGroup::Backbone, blk.fc1.w.shape(), blk.fc1.w.data());
            f(&p("fc1.b"), ParamGroup::Backbone, &[blk.fc1.b.len()], &blk.fc1.b);
            f(&p("fc2.w"), ParamGroup::Backbone, blk.fc2.w.shape(), blk.fc2.w.data());
            f(&p("fc2.b"), ParamGroup::Backbone, &[blk.fc2.b.len()], &blk.fc2.b);
            for (tag, ad) in [("ad1", &blk.serial), ("ad2", &blk.parallel)] {
                if let Some(ad) = ad {
                    f(&p(&format!("{tag}.down.w")), ParamGroup::Adapters, ad.down.w.shape(), ad.down.w.data());
                    f(&p(&format!("{tag}.down.b")), ParamGroup::Adapters, &[ad.down.b.len()], &ad.down.b);
                    f(&p(&format!("{tag}.up.w")), ParamGroup::Adapters, ad.up.w.shape(), ad.up.w.data());
                    f(&p(&format!("{tag}.up.b")), ParamGroup::Adapters, &[ad.up.b.len()], &ad.up.b);
                }
            }
        }
        f("final_ln.g", ParamGroup::Backbone, &[b.final_ln.gamma.len()], &b.final_ln.gamma);
        f("final_ln.b", ParamGroup::Backbone, &[b.final_ln.beta.len()], &b.final_ln.beta);
        f("head.conv1.w", ParamGroup::LocalHead, self.head.conv1.w.shape(), self.head.conv1.w.data());
        f("head.conv1.b", ParamGroup::LocalHead, &[self.head.conv1.b.len()], &self.head.conv1.b);
        f("head.conv2.w", ParamGroup::LocalHead, self.head.conv2.w.shape(), self.head.conv2.w.data());
        f("head.conv2.b", ParamGroup::LocalHead, &[self.head.conv2.b.len()], &self.head.conv2.b);
        f("gem.p", ParamGroup::Gem, &[1], std::slice::from_ref(&self.gem_p));
    }

    /// Mutable variant of [`Model::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut [f64])) {
        let b = &mut self.backbone;
        f("patch.w", ParamGroup::Backbone, b.patch.w.data_mut());
        f("patch.b", ParamGroup::Backbone, &mut b.patch.b);
        f("cls", ParamGroup::Backbone, &mut b.cls);
        f("pos", ParamGroup::Backbone, b.pos.data_mut());
        for (i, blk) in b.blocks.iter_mut().enumerate() {
            macro_rules! visit {
                ($suffix:expr, $group:expr, $slice:expr) => {
                    f(&format!("block{}.{}", i, $suffix), $group, $slice)
                };
            }
            visit!("ln1.g", ParamGroup::Backbone, &mut blk.ln1.gamma);
            visit!("ln1.b", ParamGroup::Backbone, &mut blk.ln1.beta);
            visit!("attn.wq", ParamGroup::Backbone, blk.attn.wq.data_mut());
            visit!("attn.bq", ParamGroup::Backbone, &mut blk.attn.bq);
            visit!("attn.wk", ParamGroup::Backbone, blk.attn.wk.data_mut());
            visit!("attn.bk", ParamGroup::Backbone, &mut blk.attn.bk);
            visit!("attn.wv", ParamGroup::Backbone, blk.attn.wv.data_mut());
            visit!("attn.bv", ParamGroup::Backbone, &mut blk.attn.bv);
            visit!("attn.wo", ParamGroup::Backbone, blk.attn.wo.data_mut());
            visit!("attn.bo", ParamGroup::Backbone, &mut blk.attn.bo);
            visit!("ln2.g", ParamGroup::Backbone, &mut blk.ln2.gamma);
            visit!("ln2.b", ParamGroup::Backbone, &mut blk.ln2.beta);
            visit!("fc1.w", ParamGroup::Backbone, blk.fc1.w.data_mut());
            visit!("fc1.b", ParamGroup::Backbone, &mut blk.fc1.b);
            visit!("fc2.w", ParamGroup::Backbone, blk.fc2.w.data_mut());
            visit!("fc2.b", ParamGroup::Backbone, &mut blk.fc2.b);
            for (tag, ad) in [("ad1", &mut blk.serial), ("ad2", &mut blk.parallel)] {
                if let Some(ad) = ad {
                    visit!(format!("{tag}.down.w"), ParamGroup::Adapters, ad.down.w.data_mut());
                    visit!(format!("{tag}.down.b"), ParamGroup::Adapters, &mut ad.down.b);
                    visit!(format!("{tag}.up.w"), ParamGroup::Adapters, ad.up.w.data_mut());
                    visit!(format!("{tag}.up.b"), ParamGroup::Adapters, &mut ad.up.b);
                }
            }
        }
        f("final_ln.g", ParamGroup::Backbone, &mut b.final_ln.gamma);
        f("final_ln.b", ParamGroup::Backbone, &mut b.final_ln.beta);
        f("head.conv1.w", ParamGroup::LocalHead, self.head.conv1.w.data_mut());
        f("head.conv1.b", ParamGroup::LocalHead, &mut self.head.conv1.b);
        f("head.conv2.w", ParamGroup::LocalHead, self.head.conv2.w.data_mut());
        f("head.conv2.b", ParamGroup::LocalHead, &mut self.head.conv2.b);
        f("gem.p", ParamGroup::Gem, std::slice::from_mut(&mut self.gem_p));
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _, _, v| n += v.len());
        n
    }

    // -- checkpoint format ---------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        wire::write_u32(w, CHECKPOINT_VERSION)?;

        let cfg = config_to_text(&self.config);
        wire::write_u32(w, cfg.len() as u32)?;
        w.write_all(cfg.as_bytes())?;

        let mut count = 0u32;
        self.for_each_param(|_, _, _, _| count += 1);
        wire::write_u32(w, count)?;

        let mut result = Ok(());
        self.for_each_param(|name, _, shape, values| {
            if result.is_err() {
                return;
            }
            result = (|| -> Result<()> {
                wire::write_u32(w, name.len() as u32)?;
                w.write_all(name.as_bytes())?;
                wire::write_u32(w, shape.len() as u32)?;
                for &d in shape {
                    wire::write_u32(w, d as u32)?;
                }
                wire::write_f32_slice(w, values)?;
                Ok(())
            })();
        });
        result
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        Model::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Model> {
        wire::expect_header(r, CHECKPOINT_CONTEXT, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;

        let cfg_len = wire::read_u32(r, CHECKPOINT_CONTEXT, "config length")? as usize;
        let cfg_bytes = wire::read_bytes(r, cfg_len, CHECKPOINT_CONTEXT, "config block")?;
        let cfg_text = String::from_utf8(cfg_bytes)
            .map_err(|_| Error::Checkpoint("config block is not valid utf-8".into()))?;
        let config = config_from_text(&cfg_text)?;

        let count = wire::read_u32(r, CHECKPOINT_CONTEXT, "array count")? as usize;
        let mut arrays = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = wire::read_u32(r, CHECKPOINT_CONTEXT, "array name length")? as usize;
            let name_bytes = wire::read_bytes(r, name_len, CHECKPOINT_CONTEXT, "array name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("array name is not valid utf-8".into()))?;
            let rank = wire::read_u32(r, CHECKPOINT_CONTEXT, "array rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(wire::read_u32(r, CHECKPOINT_CONTEXT, "array dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let values = wire::read_f32_vec(r, numel, CHECKPOINT_CONTEXT, &format!("values of {name}"))?;
            if arrays.insert(name.clone(), (shape, values)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array '{name}'")));
            }
        }

        let mut model = Model::init(config, 0)?;
        let mut missing = Vec::new();
        model.for_each_param_mut(|name, _, slot| match arrays.remove(name) {
            Some((_, values)) if values.len() == slot.len() => slot.copy_from_slice(&values),
            Some((shape, values)) => {
                missing.push(format!(
                    "array '{name}' has shape {shape:?} ({} values), model wants {}",
                    values.len(),
                    slot.len()
                ));
            }
            None => missing.push(format!("array '{name}' missing")),
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(missing.join("; ")));
        }
        if !arrays.is_empty() {
            let extras: Vec<String> = arrays.keys().cloned().collect();
            return Err(Error::Checkpoint(format!(
                "unexpected arrays: {}",
                extras.join(", ")
            )));
        }
        Ok(model)
    }
}

fn config_to_text(c: &ModelConfig) -> String {
    let b = &c.backbone;
    format!(
        "image_size={}\npatch_size={}\nembed_dim={}\nnum_blocks={}\nnum_heads={}\n\
         adapter_mode={}\nbottleneck_ratio={}\nadapter_scale={}\nln_eps={}\n\
         head_mid_channels={}\nhead_out_channels={}\nglobal_mode={}\n\
         gem_p_init={}\ngem_p_learnable={}\ngem_eps={}\n",
        b.image_size,
        b.patch_size,
        b.embed_dim,
        b.num_blocks,
        b.num_heads,
        b.adapter_mode.as_str(),
        b.bottleneck_ratio,
        b.adapter_scale,
        b.ln_eps,
        c.head_mid_channels,
        c.head_out_channels,
        c.global_mode.as_str(),
        c.gem_p_init,
        c.gem_p_learnable,
        c.gem_eps,
    )
}

fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        map.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("config key '{key}' missing")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config key '{key}' is not an integer")))
    };
    let parse_f64 = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config key '{key}' is not a number")))
    };
    let parse_bool = |key: &str| -> Result<bool> {
        get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config key '{key}' is not a bool")))
    };

    Ok(ModelConfig {
        backbone: BackboneConfig {
            image_size: parse_usize("image_size")?,
            patch_size: parse_usize("patch_size")?,
            embed_dim: parse_usize("embed_dim")?,
            num_blocks: parse_usize("num_blocks")?,
            num_heads: parse_usize("num_heads")?,
            adapter_mode: AdapterMode::parse(get("adapter_mode")?)?,
            bottleneck_ratio: parse_f64("bottleneck_ratio")?,
            adapter_scale: parse_f64("adapter_scale")?,
            ln_eps: parse_f64("ln_eps")?,
        },
        head_mid_channels: parse_usize("head_mid_channels")?,
        head_out_channels: parse_usize("head_out_channels")?,
        global_mode: GlobalMode::parse(get("global_mode")?)?,
        gem_p_init: parse_f64("gem_p_init")?,
        gem_p_learnable: parse_bool("gem_p_learnable")?,
        gem_eps: parse_f64("gem_eps")?,
    })
}
