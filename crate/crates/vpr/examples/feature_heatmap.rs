//! Emits the channel-mean heatmap of a backbone feature map: one value per
//! spatial location, min-max normalized, written as CSV and as a PGM image.

use std::path::PathBuf;

use vpr::backbone::backbone_forward;
use vpr::heatmap::{channel_mean_map, write_heatmap_csv, write_heatmap_pgm};
use vpr::model::{Model, ModelConfig};
use vpr::world::{generate_synth_world, SynthWorldConfig};

fn main() -> vpr::Result<()> {
    let world = generate_synth_world(&SynthWorldConfig {
        num_places: 1,
        aliasing_pairs: 0,
        seed: 11,
        ..SynthWorldConfig::default()
    })?;
    let model = Model::init(ModelConfig::desk(), 42)?;
    let out = backbone_forward(&world.images[0], &model.backbone, &model.config.backbone)?;
    println!("feature map: {:?}", out.feature_map.shape());

    let map = channel_mean_map(&out.feature_map)?;
    let dir = PathBuf::from("target/example-artifacts");
    std::fs::create_dir_all(&dir)?;
    write_heatmap_csv(&dir.join("heatmap.csv"), &map)?;
    write_heatmap_pgm(&dir.join("heatmap.pgm"), &map)?;

    for row in map.values.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
        println!("  {}", cells.join(" "));
    }
    println!("written to {}", dir.join("heatmap.{csv,pgm}").display());
    Ok(())
}
