//! Re-ranking cost measurement: per-query wall time across candidate-list
//! sizes and grid resolutions, with log-log slope fits. Matching one
//! candidate is one similarity matrix plus a mutual-neighbor scan, so time
//! should grow linearly in k and quadratically in the grid location count.

use std::fs::File;
use std::hint::black_box;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matcher::{mutual_nn_count_flat, similarity_matrix_flat};
use crate::rng::seeded_rng;

/// Arithmetic width used by the timed matching kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Precision> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!(
                "unknown precision {other:?} (expected f32 or f64)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Candidate-list sizes swept at a fixed grid side.
    pub k_values: Vec<usize>,
    /// Grid side used for the k sweep.
    pub k_sweep_side: usize,
    /// Grid sides swept at a fixed k (location counts are side^2).
    pub grid_sides: Vec<usize>,
    /// Candidate count used for the grid sweep.
    pub grid_sweep_k: usize,
    pub local_dim: usize,
    /// Distinct query grids averaged per cell.
    pub queries: usize,
    /// Timed repeats per query; the minimum is kept.
    pub repeats: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            k_values: vec![10, 25, 50, 100],
            k_sweep_side: 15,
            grid_sides: vec![8, 15, 29],
            grid_sweep_k: 10,
            local_dim: 16,
            queries: 3,
            repeats: 5,
            precision: Precision::F64,
            seed: 42,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.grid_sides.is_empty() {
            return Err(Error::invalid("bench needs at least one k and one grid side"));
        }
        if self.k_values.iter().any(|&k| k == 0) || self.grid_sides.iter().any(|&s| s == 0) {
            return Err(Error::invalid("bench sizes must be >= 1"));
        }
        if self.local_dim == 0 || self.queries == 0 || self.repeats == 0 || self.grid_sweep_k == 0 {
            return Err(Error::invalid("bench counts must be >= 1"));
        }
        Ok(())
    }
}

/// One measured cell.
#[derive(Debug, Clone)]
pub struct BenchRow {
    /// "k" or "grid" depending on which variable the row sweeps.
    pub sweep: &'static str,
    pub k: usize,
    pub locations: usize,
    pub per_query_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of time vs k.
    pub slope_k: f64,
    /// Log-log slope of time vs location count.
    pub slope_locations: f64,
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "slope needs at least two points");
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn random_unit_grids<T: Float>(
    count: usize,
    locations: usize,
    dim: usize,
    seed: u64,
    label: &str,
) -> Vec<Vec<T>> {
    let mut rng = seeded_rng(seed, label);
    (0..count)
        .map(|_| {
            let mut flat = vec![T::zero(); locations * dim];
            for loc in 0..locations {
                let v = &mut flat[loc * dim..(loc + 1) * dim];
                let mut norm = 0.0f64;
                let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for x in &raw {
                    norm += x * x;
                }
                let norm = norm.sqrt().max(1e-12);
                for (slot, x) in v.iter_mut().zip(&raw) {
                    *slot = T::from(x / norm).unwrap();
                }
            }
            flat
        })
        .collect()
}

/// Times re-ranking one query against `k` candidates: builds each similarity
/// matrix and counts mutual neighbors. Returns the per-query wall time.
fn time_cell<T: Float>(queries: &[Vec<T>], candidates: &[Vec<T>], side: usize, dim: usize, repeats: usize) -> f64 {
    let locations = side * side;
    let mut sim = vec![T::zero(); locations * locations];
    let mut total = 0.0;
    for q in queries {
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let start = Instant::now();
            let mut acc = 0usize;
            for c in candidates {
                similarity_matrix_flat(q, c, locations, locations, dim, &mut sim);
                acc += mutual_nn_count_flat(&sim, locations, locations);
            }
            black_box(acc);
            let dt = start.elapsed().as_secs_f64();
            if dt < best {
                best = dt;
            }
        }
        total += best;
    }
    total / queries.len() as f64
}

fn run_sweeps<T: Float>(cfg: &BenchConfig) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    let dim = cfg.local_dim;

    let locations = cfg.k_sweep_side * cfg.k_sweep_side;
    let queries: Vec<Vec<T>> = random_unit_grids(cfg.queries, locations, dim, cfg.seed, "bench.kq");
    let max_k = cfg.k_values.iter().copied().max().unwrap();
    let candidates: Vec<Vec<T>> = random_unit_grids(max_k, locations, dim, cfg.seed, "bench.kc");
    for &k in &cfg.k_values {
        rows.push(BenchRow {
            sweep: "k",
            k,
            locations,
            per_query_seconds: time_cell(&queries, &candidates[..k], cfg.k_sweep_side, dim, cfg.repeats),
        });
    }

    for &side in &cfg.grid_sides {
        let locations = side * side;
        let label_q = format!("bench.gq{side}");
        let label_c = format!("bench.gc{side}");
        let queries: Vec<Vec<T>> = random_unit_grids(cfg.queries, locations, dim, cfg.seed, &label_q);
        let candidates: Vec<Vec<T>> =
            random_unit_grids(cfg.grid_sweep_k, locations, dim, cfg.seed, &label_c);
        rows.push(BenchRow {
            sweep: "grid",
            k: cfg.grid_sweep_k,
            locations,
            per_query_seconds: time_cell(&queries, &candidates, side, dim, cfg.repeats),
        });
    }
    rows
}

/// Runs both sweeps and fits the scaling slopes.
pub fn benchmark_rerank(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let rows = match cfg.precision {
        Precision::F32 => run_sweeps::<f32>(cfg),
        Precision::F64 => run_sweeps::<f64>(cfg),
    };
    let (ks, kt): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.sweep == "k")
        .map(|r| (r.k as f64, r.per_query_seconds))
        .unzip();
    let (ns, nt): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.sweep == "grid")
        .map(|r| (r.locations as f64, r.per_query_seconds))
        .unzip();
    Ok(BenchReport {
        slope_k: if ks.len() >= 2 { log_log_slope(&ks, &kt) } else { f64::NAN },
        slope_locations: if ns.len() >= 2 { log_log_slope(&ns, &nt) } else { f64::NAN },
        rows,
    })
}

/// CSV: sweep, k, locations, per_query_seconds; slopes appended as comments.
pub fn write_bench_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "sweep,k,locations,per_query_seconds")?;
    for r in &report.rows {
        writeln!(w, "{},{},{},{:.9}", r.sweep, r.k, r.locations, r.per_query_seconds)?;
    }
    writeln!(w, "# slope_k,{:.4}", report.slope_k)?;
    writeln!(w, "# slope_locations,{:.4}", report.slope_locations)?;
    w.flush()?;
    Ok(())
}
