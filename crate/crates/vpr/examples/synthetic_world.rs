//! Generates a small synthetic place world and shows what makes it useful
//! for retrieval experiments: geotagged variants that stay within the
//! ground-truth radius, well-separated places, and aliased place pairs that
//! share colors but not layouts.

use vpr::index::haversine_m;
use vpr::world::{generate_synth_world, write_synth_world, SynthWorldConfig};

fn main() -> vpr::Result<()> {
    let config = SynthWorldConfig {
        num_places: 8,
        aliasing_pairs: 2,
        seed: 7,
        ..SynthWorldConfig::default()
    };
    let world = generate_synth_world(&config)?;
    // A noise-free twin exposes the aliasing construction exactly.
    let clean = generate_synth_world(&SynthWorldConfig {
        condition: vpr::world::ConditionNoise {
            gain: 0.0,
            offset: 0.0,
            pixel_noise: 0.0,
            jitter_px: 0,
        },
        ..config.clone()
    })?;

    println!(
        "{} places x {} variants = {} images",
        config.num_places,
        config.variants_per_place,
        world.entries.len()
    );
    let mut split_counts = std::collections::BTreeMap::new();
    for e in &world.entries {
        *split_counts.entry(e.split.as_str()).or_insert(0usize) += 1;
    }
    println!("splits: {split_counts:?}");
    println!("aliased places: {:?}", world.aliased_places);

    // Variants of one place sit within the 25 m ground-truth radius of each
    // other; different places sit far outside it.
    let a = &world.entries[0];
    let b = &world.entries[1];
    let other = &world.entries[config.variants_per_place];
    println!(
        "same place: {:.1} m apart, different places: {:.1} m apart",
        haversine_m(a.lat, a.lon, b.lat, b.lon),
        haversine_m(a.lat, a.lon, other.lat, other.lon)
    );

    // An aliased pair shares its palette: with condition noise turned off,
    // channel means agree exactly even though the layouts differ.
    let (p, q) = (clean.aliased_places[0], clean.aliased_places[1]);
    let vp = config.variants_per_place;
    let mean = |img: &vpr::tensor::Tensor, c: usize| {
        let d = img.data();
        d.iter().skip(c).step_by(3).sum::<f64>() / (d.len() / 3) as f64
    };
    for c in 0..3 {
        println!(
            "noise-free channel {c} mean: place {p} = {:.6}, aliased place {q} = {:.6}",
            mean(&clean.images[p * vp], c),
            mean(&clean.images[q * vp], c)
        );
    }
    let differing = clean.images[p * vp]
        .data()
        .iter()
        .zip(clean.images[q * vp].data())
        .filter(|(a, b)| (*a - *b).abs() > 1e-12)
        .count();
    println!("...while {differing} of {} pixel values differ", clean.images[p * vp].numel());

    let out = std::path::PathBuf::from("target/example-artifacts/synthetic-world");
    write_synth_world(&out, &world)?;
    println!("written to {}", out.display());
    Ok(())
}
