//! Verifies the hand-derived gradients of the combined triplet objective
//! against central finite differences on a real batch, skipping coordinates
//! that sit on a kink (ReLU boundaries, hinge corners, match-set changes)
//! where one-sided derivatives disagree.

use vpr::gradcheck::{check_model_gradients, random_batch, GradCheckConfig};
use vpr::loss::LossConfig;
use vpr::model::{Model, ModelConfig};

fn main() -> vpr::Result<()> {
    let mut model = Model::init(ModelConfig::desk(), 42)?;
    // Zero-init adapters would hide adapter gradients; wake them up.
    model.randomize_adapters(43, 0.05);

    let batch = random_batch(&model.config, 1, 2, 44);
    let cfg = GradCheckConfig {
        samples: 60,
        seed: 45,
        ..GradCheckConfig::default()
    };
    println!(
        "checking {} sampled coordinates (step {:.0e}) ...",
        cfg.samples, cfg.step
    );
    let report = check_model_gradients(&model, &batch, &LossConfig::default(), &cfg)?;
    println!(
        "checked {}, skipped {} near kinks, max relative error {:.3e}",
        report.checked, report.skipped, report.max_rel_err
    );
    if let Some(worst) = &report.worst_label {
        println!("worst coordinate: {worst}");
    }
    if let Some(w) = &report.worst {
        println!(
            "  analytic {:.9e} vs numeric {:.9e}",
            w.analytic, w.numeric
        );
    }
    assert!(report.max_rel_err < 1e-4);
    println!("analytic gradients agree with finite differences");
    Ok(())
}
