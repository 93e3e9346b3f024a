//! Synthetic place world: a desk-scale substitute for street-level
//! benchmark datasets.
//!
//! Each place is a grid of colored rectangular landmarks. Variants of a
//! place re-render it under condition changes (channel gains and offsets,
//! pixel noise, small cyclic translations) and tiny geotag offsets.
//! Aliasing pairs are two places sharing the same multiset of landmark
//! colors in different spatial layouts: their channel statistics coincide
//! while their geometry differs, which is exactly the failure mode local
//! re-ranking is meant to fix.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio::write_ppm;
use crate::index::EARTH_RADIUS_M;
use crate::manifest::{save_manifest, ManifestEntry, Split};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

/// Per-variant appearance perturbations.
#[derive(Debug, Clone, Copy)]
pub struct ConditionNoise {
    /// Amplitude of the per-channel multiplicative gain: gain in 1 +/- this.
    pub gain: f64,
    /// Amplitude of the per-channel additive offset.
    pub offset: f64,
    /// Standard deviation of additive per-pixel noise.
    pub pixel_noise: f64,
    /// Maximum cyclic translation in pixels along each axis.
    pub jitter_px: usize,
}

impl Default for ConditionNoise {
    fn default() -> Self {
        Self {
            gain: 0.35,
            offset: 0.15,
            pixel_noise: 0.03,
            jitter_px: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorldConfig {
    pub num_places: usize,
    /// Distance between place centers; must clear twice the 25 m match
    /// radius so ground truth is unambiguous.
    pub place_spacing_m: f64,
    pub variants_per_place: usize,
    /// Landmark cells per image side; must divide image_size.
    pub landmark_grid: usize,
    pub condition: ConditionNoise,
    /// Number of place pairs sharing landmark colors in permuted layouts.
    pub aliasing_pairs: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            num_places: 64,
            place_spacing_m: 60.0,
            variants_per_place: 8,
            landmark_grid: 4,
            condition: ConditionNoise::default(),
            aliasing_pairs: 16,
            image_size: 64,
            seed: 17,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.place_spacing_m <= 50.0 {
            return Err(Error::invalid(
                "place spacing must exceed 50 m (twice the 25 m match radius)",
            ));
        }
        if self.aliasing_pairs > self.num_places / 2 {
            return Err(Error::invalid("more aliasing pairs than place pairs"));
        }
        if self.num_places == 0 {
            return Err(Error::invalid("world needs at least one place"));
        }
        if self.variants_per_place < 4 {
            return Err(Error::invalid(
                "need at least 4 variants to fill database, train, val and query splits",
            ));
        }
        if self.landmark_grid < 2 || self.image_size % self.landmark_grid != 0 {
            return Err(Error::invalid(
                "landmark grid must be >= 2 and divide the image size",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub entries: Vec<ManifestEntry>,
    /// Images parallel to `entries`.
    pub images: Vec<Tensor>,
    /// Indices of places that belong to an aliasing pair.
    pub aliased_places: Vec<usize>,
}

/// Ids encode place and variant; variants of one place stay adjacent.
pub fn image_id(place: usize, variant: usize) -> u64 {
    (place * 1000 + variant) as u64
}

pub fn place_of_id(id: u64) -> usize {
    (id / 1000) as usize
}

/// Variants split 3/8 database, 2/8 train, 1/8 val, 2/8 query (rounded,
/// with at least one of each).
fn split_boundaries(total: usize) -> (usize, usize, usize) {
    let db = ((0.375 * total as f64).round() as usize).max(1);
    let train = ((0.25 * total as f64).round() as usize).max(1);
    let val = ((0.125 * total as f64).round() as usize).max(1);
    (db, db + train, db + train + val)
}

fn split_for_variant(variant: usize, total: usize) -> Split {
    let (db_end, train_end, val_end) = split_boundaries(total);
    match variant {
        v if v < db_end => Split::Database,
        v if v < train_end => Split::Train,
        v if v < val_end => Split::Val,
        _ => Split::Query,
    }
}

const DEG_PER_M: f64 = 180.0 / (std::f64::consts::PI * EARTH_RADIUS_M);

fn render_cells(colors: &[[f64; 3]], grid: usize, size: usize) -> Tensor {
    let cell = size / grid;
    let mut img = Tensor::zeros(&[size, size, 3]);
    for y in 0..size {
        for x in 0..size {
            let c = colors[(y / cell) * grid + (x / cell)];
            for d in 0..3 {
                img.data_mut()[(y * size + x) * 3 + d] = c[d];
            }
        }
    }
    img
}

pub fn generate_synth_world(config: &SynthWorldConfig) -> Result<SynthWorld> {
    config.validate()?;
    let size = config.image_size;
    let cells = config.landmark_grid * config.landmark_grid;

    // Base landmark colors per place.
    let mut palettes: Vec<Vec<[f64; 3]>> = Vec::with_capacity(config.num_places);
    for p in 0..config.num_places {
        let mut rng = seeded_rng(config.seed, &format!("place{p}.base"));
        palettes.push(
            (0..cells)
                .map(|_| {
                    [
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                        rng.gen_range(0.05..0.95),
                    ]
                })
                .collect(),
        );
    }
    // Aliasing pairs (2a, 2a+1): the odd place reuses its twin's colors in
    // a permuted layout, so channel statistics match but geometry differs.
    let mut aliased_places = Vec::new();
    for a in 0..config.aliasing_pairs {
        let (even, odd) = (2 * a, 2 * a + 1);
        let mut rng = seeded_rng(config.seed, &format!("alias{a}"));
        let mut permuted = palettes[even].clone();
        loop {
            permuted.shuffle(&mut rng);
            if permuted != palettes[even] {
                break;
            }
        }
        palettes[odd] = permuted;
        aliased_places.push(even);
        aliased_places.push(odd);
    }

    let grid_cols = (config.num_places as f64).sqrt().ceil() as usize;
    let spacing_deg = config.place_spacing_m * DEG_PER_M;
    let jitter = config.condition.jitter_px as i64;

    let mut entries = Vec::new();
    let mut images = Vec::new();
    for p in 0..config.num_places {
        let base = render_cells(&palettes[p], config.landmark_grid, size);
        let place_lat = (p / grid_cols) as f64 * spacing_deg;
        let place_lon = (p % grid_cols) as f64 * spacing_deg;
        for v in 0..config.variants_per_place {
            let mut rng = seeded_rng(config.seed, &format!("place{p}.variant{v}"));
            let dy = rng.gen_range(-jitter..=jitter);
            let dx = rng.gen_range(-jitter..=jitter);
            let gains: Vec<f64> = (0..3)
                .map(|_| 1.0 + rng.gen_range(-config.condition.gain..=config.condition.gain))
                .collect();
            let offsets: Vec<f64> = (0..3)
                .map(|_| rng.gen_range(-config.condition.offset..=config.condition.offset))
                .collect();
            let mut img = Tensor::zeros(&[size, size, 3]);
            for y in 0..size {
                let sy = (y as i64 + dy).rem_euclid(size as i64) as usize;
                for x in 0..size {
                    let sx = (x as i64 + dx).rem_euclid(size as i64) as usize;
                    for d in 0..3 {
                        let noise = config.condition.pixel_noise * normal_sample(&mut rng);
                        let val = base.data()[(sy * size + sx) * 3 + d] * gains[d]
                            + offsets[d]
                            + noise;
                        img.data_mut()[(y * size + x) * 3 + d] = val.clamp(0.0, 1.0);
                    }
                }
            }
            // Geotag offset keeps all variants of a place within 10 m of
            // each other and far inside the 25 m match radius.
            let lat = place_lat + rng.gen_range(-3.5..=3.5) * DEG_PER_M;
            let lon = place_lon + rng.gen_range(-3.5..=3.5) * DEG_PER_M;
            entries.push(ManifestEntry {
                id: image_id(p, v),
                image_path: format!("images/place{p:03}_v{v}.ppm"),
                lat,
                lon,
                heading_deg: None,
                split: split_for_variant(v, config.variants_per_place),
            });
            images.push(img);
        }
    }
    Ok(SynthWorld {
        entries,
        images,
        aliased_places,
    })
}

fn normal_sample(rng: &mut impl Rng) -> f64 {
    // Box-Muller; rejects the zero sample so the log stays finite.
    loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        if u1 > 0.0 {
            let u2: f64 = rng.gen_range(0.0..1.0);
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Writes the world under `dir`: PPM images plus `manifest.jsonl`.
pub fn write_synth_world(dir: &std::path::Path, world: &SynthWorld) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (entry, image) in world.entries.iter().zip(&world.images) {
        write_ppm(&dir.join(&entry.image_path), image)?;
    }
    save_manifest(&dir.join("manifest.jsonl"), &world.entries)
}
