//! Parameter accounting across adapter modes: how much of the model trains
//! when the backbone is frozen and only adapters, the local head and
//! (optionally) the pooling exponent stay tunable.

use vpr::backbone::AdapterMode;
use vpr::model::{Model, ModelConfig};
use vpr::trainer::{count_parameters, TrainConfig};

fn main() -> vpr::Result<()> {
    println!(
        "{:<14} {:>9} {:>9} {:>9} {:>8}",
        "adapter mode", "total", "tunable", "frozen", "ratio"
    );
    for mode in [
        AdapterMode::None,
        AdapterMode::SerialOnly,
        AdapterMode::ParallelOnly,
        AdapterMode::Both,
    ] {
        let mut config = ModelConfig::desk();
        config.backbone.adapter_mode = mode;
        let model = Model::init(config, 0)?;
        let report = count_parameters(&model, &TrainConfig::default_freeze(&model.config));
        assert_eq!(
            report.total_params,
            report.tunable_params + report.frozen_params
        );
        println!(
            "{:<14} {:>9} {:>9} {:>9} {:>8.5}",
            mode.as_str(),
            report.total_params,
            report.tunable_params,
            report.frozen_params,
            report.tunable_params as f64 / report.total_params as f64
        );
    }

    let model = Model::init(ModelConfig::desk(), 0)?;
    let report = count_parameters(&model, &TrainConfig::default_freeze(&model.config));
    println!("\nper-group breakdown (mode = both):");
    for (name, count, frozen) in &report.groups {
        println!(
            "  {:<11} {:>9} {}",
            name,
            count,
            if *frozen { "frozen" } else { "tunable" }
        );
    }
    Ok(())
}
