//! Finite-difference verification of analytic gradients.
//!
//! The checker compares analytic derivatives against central differences
//! at sampled coordinates. The pipeline is piecewise smooth: ReLU units,
//! the GeM floor clamp, normalization fallbacks, hinge losses and mutual
//! match selection all switch branches discontinuously. A coordinate whose
//! branch signature changes between the two probe points (or that sits
//! within `kink_tol` of a hinge boundary) is skipped as non-differentiable
//! rather than failed.

use rand::seq::index::sample as index_sample;

use crate::error::{Error, Result};
use crate::grid::LocalFeatureGrid;
use crate::heads::{GEM_CLAMP_EPS, GLOBAL_L2_EPS, INTRA_L2_EPS};
use crate::loss::{combined_loss_with_grads, LossConfig};
use crate::matcher::{mutual_nn_matches, similarity_matrix};
use crate::model::{Model, ModelCache, ModelConfig};
use crate::params::Gradients;
use crate::rng::{fnv1a, seeded_rng};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step h.
    pub step: f64,
    /// Hinge arguments closer than this to zero mark the probe unstable.
    pub kink_tol: f64,
    /// Floor of the relative-error denominator.
    pub denom_floor: f64,
    /// Number of sampled parameter coordinates.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink_tol: 1e-3,
            denom_floor: 1e-6,
            samples: 200,
            seed: 7,
        }
    }
}

/// One probe of the loss function: its value, a hash of every branch
/// decision taken while computing it, and whether the evaluation sat
/// safely away from known kinks.
#[derive(Debug, Clone, Copy)]
pub struct LossProbe {
    pub value: f64,
    pub signature: u64,
    pub stable: bool,
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
    /// Human-readable name of the worst coordinate, when known.
    pub worst_label: Option<String>,
}

impl GradCheckReport {
    fn record(&mut self, check: CoordCheck) {
        if check.rel_err >= self.max_rel_err {
            self.max_rel_err = check.rel_err;
            self.worst = Some(check.clone());
        }
        self.checked += 1;
    }
}

/// Central-difference check of `analytic` against `eval` at the given
/// coordinates of `x`. Probes whose branch signatures disagree on the two
/// sides (or with the center), or that report instability, are skipped.
pub fn central_difference_check(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(&[f64]) -> Result<LossProbe>,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::shape(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let center = eval(x)?;
    let mut report = GradCheckReport::default();
    let mut point = x.to_vec();
    for &coord in coords {
        point[coord] = x[coord] + cfg.step;
        let plus = eval(&point)?;
        point[coord] = x[coord] - cfg.step;
        let minus = eval(&point)?;
        point[coord] = x[coord];
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(Error::invalid(format!(
                "loss is non-finite at perturbed coordinate {coord}"
            )));
        }
        let same_branch = plus.signature == minus.signature && plus.signature == center.signature;
        if !same_branch || !plus.stable || !minus.stable || !center.stable {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * cfg.step);
        let a = analytic[coord];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.denom_floor);
        report.record(CoordCheck {
            coord,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(report)
}

/// Accumulates branch decisions into one FNV-1a hash.
#[derive(Default)]
struct BranchTrace {
    bytes: Vec<u8>,
    stable: bool,
}

impl BranchTrace {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            stable: true,
        }
    }

    fn push_bool(&mut self, b: bool) {
        self.bytes.push(b as u8);
    }

    fn push_usize(&mut self, v: usize) {
        self.bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn finish(&self) -> u64 {
        fnv1a(&self.bytes)
    }
}

/// One training triplet as raw images.
#[derive(Debug, Clone)]
pub struct TripletImages {
    pub query: Tensor,
    pub positive: Tensor,
    pub negatives: Vec<Tensor>,
}

/// Builds a seeded batch of triplets for gradient checking. The positive
/// is a noisy copy of the query and the negatives blend the query with an
/// unrelated image, so both loss terms usually have active hinges.
pub fn random_batch(
    config: &ModelConfig,
    triplets: usize,
    negatives: usize,
    seed: u64,
) -> Vec<TripletImages> {
    let side = config.backbone.image_size;
    let numel = side * side * 3;
    let mut batch = Vec::with_capacity(triplets);
    for t in 0..triplets {
        let mut rng = seeded_rng(seed, &format!("gradcheck.triplet{t}"));
        let query: Vec<f64> = (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect();
        let positive: Vec<f64> = query
            .iter()
            .map(|&v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
            .collect();
        let mut negs = Vec::with_capacity(negatives);
        for _ in 0..negatives {
            let neg: Vec<f64> = query
                .iter()
                .map(|&v| {
                    let other: f64 = rng.gen_range(0.0..1.0);
                    (0.6 * v + 0.4 * other).clamp(0.0, 1.0)
                })
                .collect();
            negs.push(Tensor::from_vec(&[side, side, 3], neg).unwrap());
        }
        batch.push(TripletImages {
            query: Tensor::from_vec(&[side, side, 3], query).unwrap(),
            positive: Tensor::from_vec(&[side, side, 3], positive).unwrap(),
            negatives: negs,
        });
    }
    batch
}

fn trace_image(trace: &mut BranchTrace, cache: &ModelCache) {
    for mask in cache.backbone.relu_masks() {
        for b in mask {
            trace.push_bool(b);
        }
    }
    for b in cache.head.relu_mask() {
        trace.push_bool(b);
    }
    for &v in cache.backbone_out.feature_map.data() {
        trace.push_bool(v > GEM_CLAMP_EPS);
    }
    trace.push_bool(cache.global.norm > GLOBAL_L2_EPS);
    for &n in &cache.head.norms {
        trace.push_bool(n > INTRA_L2_EPS);
    }
}

fn trace_matches(
    trace: &mut BranchTrace,
    query: &LocalFeatureGrid,
    other: &LocalFeatureGrid,
) -> Result<()> {
    let sim = similarity_matrix(query, other)?;
    let matches = mutual_nn_matches(&sim);
    trace.push_usize(matches.len());
    for m in matches {
        trace.push_usize(m.query_loc);
        trace.push_usize(m.candidate_loc);
    }
    Ok(())
}

/// Mean combined loss over a batch of triplets. When `grads` is given,
/// parameter gradients (scaled by 1/batch) are accumulated into it.
pub fn batch_loss(
    model: &Model,
    batch: &[TripletImages],
    loss_cfg: &LossConfig,
    kink_tol: f64,
    mut grads: Option<&mut Gradients>,
) -> Result<LossProbe> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient check needs at least one triplet"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut trace = BranchTrace::new();
    let mut total = 0.0;
    for triplet in batch {
        let (qf, qc) = model.forward_cached(&triplet.query)?;
        let (pf, pc) = model.forward_cached(&triplet.positive)?;
        let mut nf = Vec::new();
        for neg in &triplet.negatives {
            nf.push(model.forward_cached(neg)?);
        }
        let neg_globals: Vec<&[f64]> = nf.iter().map(|(f, _)| f.global.as_slice()).collect();
        let neg_locals: Vec<&LocalFeatureGrid> = nf.iter().map(|(f, _)| &f.local).collect();
        let (breakdown, tg) = combined_loss_with_grads(
            loss_cfg,
            &qf.global,
            &qf.local,
            &pf.global,
            &pf.local,
            &neg_globals,
            &neg_locals,
        )?;
        total += breakdown.total;

        trace_image(&mut trace, &qc);
        trace_image(&mut trace, &pc);
        for (_, nc) in &nf {
            trace_image(&mut trace, nc);
        }
        trace_matches(&mut trace, &qf.local, &pf.local)?;
        for (f, _) in &nf {
            trace_matches(&mut trace, &qf.local, &f.local)?;
        }
        for &t in breakdown
            .global_hinge_args
            .iter()
            .chain(&breakdown.local_hinge_args)
        {
            trace.push_bool(t > 0.0);
            if t.abs() < kink_tol {
                trace.stable = false;
            }
        }

        if let Some(g) = grads.as_deref_mut() {
            let grid = |src: &LocalFeatureGrid, mut data: Vec<f64>| {
                data.iter_mut().for_each(|v| *v *= scale);
                LocalFeatureGrid::from_vec(src.height(), src.width(), src.channels(), data)
            };
            let vec_scaled = |mut v: Vec<f64>| {
                v.iter_mut().for_each(|x| *x *= scale);
                v
            };
            model.backward(
                &qf,
                &qc,
                &vec_scaled(tg.d_query_global),
                &grid(&qf.local, tg.d_query_local)?,
                g,
            )?;
            model.backward(
                &pf,
                &pc,
                &vec_scaled(tg.d_positive_global),
                &grid(&pf.local, tg.d_positive_local)?,
                g,
            )?;
            for (j, (f, c)) in nf.iter().enumerate() {
                model.backward(
                    f,
                    c,
                    &vec_scaled(tg.d_negative_globals[j].clone()),
                    &grid(&f.local, tg.d_negative_locals[j].clone())?,
                    g,
                )?;
            }
        }
    }
    Ok(LossProbe {
        value: total * scale,
        signature: trace.finish(),
        stable: trace.stable,
    })
}

/// Checks the full pipeline's analytic gradients on a triplet batch:
/// backbone, adapters, heads, GeM exponent and both loss terms.
pub fn check_model_gradients(
    model: &Model,
    batch: &[TripletImages],
    loss_cfg: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    // Canonical flattening of the parameter vector.
    let mut layout: Vec<(String, usize)> = Vec::new();
    let mut flat: Vec<f64> = Vec::new();
    model.for_each_param(|name, _, _, values| {
        layout.push((name.to_string(), values.len()));
        flat.extend_from_slice(values);
    });

    let mut grads = Gradients::new();
    batch_loss(model, batch, loss_cfg, cfg.kink_tol, Some(&mut grads))?;
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient(
            "analytic gradient is non-finite".into(),
        ));
    }
    let mut analytic = Vec::with_capacity(flat.len());
    for (name, len) in &layout {
        match grads.get(name) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(*len)),
        }
    }

    let mut rng = seeded_rng(cfg.seed, "gradcheck.coords");
    let mut coords: Vec<usize> =
        index_sample(&mut rng, flat.len(), cfg.samples.min(flat.len())).into_vec();
    // The GeM exponent is one scalar among hundreds of thousands of
    // weights; always include it so its hand-derived gradient is covered.
    let mut offset = 0;
    for (name, len) in &layout {
        if name == "gem.p" && !coords.contains(&offset) {
            coords.push(offset);
        }
        offset += len;
    }

    let mut report = central_difference_check(&flat, &analytic, &coords, cfg, |point| {
        let mut probe = model.clone();
        let mut at = 0;
        probe.for_each_param_mut(|_, _, values| {
            values.copy_from_slice(&point[at..at + values.len()]);
            at += values.len();
        });
        batch_loss(&probe, batch, loss_cfg, cfg.kink_tol, None)
    })?;

    if let Some(worst) = &report.worst {
        let mut at = 0;
        for (name, len) in &layout {
            if worst.coord < at + len {
                report.worst_label = Some(format!("{}[{}]", name, worst.coord - at));
                break;
            }
            at += len;
        }
    }
    Ok(report)
}
