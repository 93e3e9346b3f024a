//! Adapter fine-tuning in miniature. Fresh adapters start as exact
//! identities (zero-initialized up-projections), the backbone stays frozen
//! while only adapters and the local head learn, and every step is driven
//! by geo-mined hard triplets.

use vpr::backbone::AdapterMode;
use vpr::dataset::split_from_world;
use vpr::loss::LossConfig;
use vpr::manifest::Split;
use vpr::model::{Model, ModelConfig};
use vpr::trainer::{count_parameters, train, MiningConfig, TrainConfig};
use vpr::world::{generate_synth_world, SynthWorldConfig};

fn main() -> vpr::Result<()> {
    let world = generate_synth_world(&SynthWorldConfig {
        num_places: 6,
        aliasing_pairs: 2,
        seed: 7,
        ..SynthWorldConfig::default()
    })?;
    let train_set = split_from_world(&world, Split::Train);
    let val_db = split_from_world(&world, Split::Database);
    let val_queries = split_from_world(&world, Split::Val);

    let mut model = Model::init(ModelConfig::desk(), 42)?;

    // Fresh adapters change nothing: compare against an adapter-free twin.
    let mut bare_config = ModelConfig::desk();
    bare_config.backbone.adapter_mode = AdapterMode::None;
    let bare = Model::init(bare_config, 42)?;
    let image = &world.images[0];
    let with = model.extract_global(image)?;
    let without = bare.extract_global(image)?;
    let max_diff = with
        .iter()
        .zip(&without)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("zero-init adapters vs no adapters, max |diff| = {max_diff:.3e}");

    let report = count_parameters(&model, &TrainConfig::default_freeze(&model.config));
    println!(
        "parameters: {} total, {} tunable ({:.1}%)",
        report.total_params,
        report.tunable_params,
        100.0 * report.tunable_params as f64 / report.total_params as f64
    );

    let config = TrainConfig {
        learning_rate: 1e-4,
        epoch_queries: 16,
        max_epochs: 2,
        ..TrainConfig::desk_default(5, &model.config)
    };
    let before = backbone_bits(&model);
    let outcome = train(
        &mut model,
        &train_set,
        &val_db,
        &val_queries,
        &config,
        &MiningConfig::default(),
        &LossConfig::default(),
    )?;
    for s in &outcome.history {
        println!(
            "epoch {}: loss {:.4}, val R@1 {:.1}, val R@5 {:.1}",
            s.epoch, s.train_loss, s.val_r1, s.val_r5
        );
    }
    println!(
        "frozen backbone untouched: {}",
        before == backbone_bits(&outcome.best)
    );
    Ok(())
}

/// Bit pattern of every backbone parameter, in canonical order, for exact
/// comparison.
fn backbone_bits(model: &Model) -> Vec<u64> {
    let mut bits = Vec::new();
    model.for_each_param(|_, group, _, values| {
        if group.name() == "backbone" {
            bits.extend(values.iter().map(|v| v.to_bits()));
        }
    });
    bits
}
