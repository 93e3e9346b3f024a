//! Runs one image through the full feature extractor and inspects the
//! results: a unit-norm global descriptor for fast search, a dense local
//! grid for re-ranking, and the coarse backbone patch grid.

use vpr::model::{Model, ModelConfig};
use vpr::world::{generate_synth_world, SynthWorldConfig};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> vpr::Result<()> {
    let world = generate_synth_world(&SynthWorldConfig {
        num_places: 1,
        aliasing_pairs: 0,
        seed: 3,
        ..SynthWorldConfig::default()
    })?;
    let image = &world.images[0];

    let model = Model::init(ModelConfig::desk(), 42)?;
    let features = model.extract(image)?;

    println!("input image: {:?}", image.shape());
    println!(
        "global descriptor: {} dims, norm {:.12}",
        features.global.len(),
        norm(&features.global)
    );
    println!(
        "local grid: {}x{}x{} ({} locations)",
        features.local.height(),
        features.local.width(),
        features.local.channels(),
        features.local.locations()
    );
    println!(
        "patch grid: {}x{}x{}",
        features.patches.height(),
        features.patches.width(),
        features.patches.channels()
    );

    // Every local feature is unit norm, so dot products are cosines.
    let norms: Vec<f64> = (0..features.local.locations())
        .map(|i| norm(features.local.feature(i)))
        .collect();
    let (min, max) = norms
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &n| (lo.min(n), hi.max(n)));
    println!("local feature norms: min {min:.12}, max {max:.12}");
    Ok(())
}
