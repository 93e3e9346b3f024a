//! In-memory image sets: the bridge between manifests on disk (or the
//! synthetic world) and training/extraction, which want geotagged tensors.

use std::path::Path;

use crate::error::Result;
use crate::imageio::read_ppm;
use crate::manifest::{ManifestEntry, Split};
use crate::tensor::Tensor;
use crate::world::SynthWorld;

#[derive(Debug, Clone)]
pub struct GeoImage {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub heading: Option<f64>,
    pub image: Tensor,
}

/// Loads every manifest entry of one split, resolving image paths against
/// `root` (the manifest's directory).
pub fn load_split(root: &Path, entries: &[ManifestEntry], split: Split) -> Result<Vec<GeoImage>> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            Ok(GeoImage {
                id: e.id,
                lat: e.lat,
                lon: e.lon,
                heading: e.heading_deg,
                image: read_ppm(&root.join(&e.image_path))?,
            })
        })
        .collect()
}

/// Pulls one split out of an in-memory synthetic world.
pub fn split_from_world(world: &SynthWorld, split: Split) -> Vec<GeoImage> {
    world
        .entries
        .iter()
        .zip(&world.images)
        .filter(|(e, _)| e.split == split)
        .map(|(e, img)| GeoImage {
            id: e.id,
            lat: e.lat,
            lon: e.lon,
            heading: e.heading_deg,
            image: img.clone(),
        })
        .collect()
}
