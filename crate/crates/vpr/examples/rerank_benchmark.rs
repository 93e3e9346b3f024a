//! Measures re-ranking cost and fits its scaling: time per query should be
//! linear in the candidate count k and quadratic in the number of grid
//! locations, because scoring one candidate builds a locations x locations
//! similarity matrix. There is no geometric verification stage to amortize.

use vpr::bench::{benchmark_rerank, BenchConfig};

fn main() -> vpr::Result<()> {
    let cfg = BenchConfig::default();
    println!(
        "k sweep at {0}x{0} grids; grid sweep at k = {1}",
        cfg.k_sweep_side, cfg.grid_sweep_k
    );
    let report = benchmark_rerank(&cfg)?;
    println!("{:<6} {:>5} {:>10} {:>16}", "sweep", "k", "locations", "per-query (s)");
    for r in &report.rows {
        println!(
            "{:<6} {:>5} {:>10} {:>16.6}",
            r.sweep, r.k, r.locations, r.per_query_seconds
        );
    }
    println!(
        "log-log slope vs k: {:.3} (linear would be 1.0)",
        report.slope_k
    );
    println!(
        "log-log slope vs locations: {:.3} (quadratic would be 2.0)",
        report.slope_locations
    );
    Ok(())
}
