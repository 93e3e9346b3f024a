//! Fine-tuning loop: geo-constrained hard-triplet mining, Adam with
//! parameter-group freezing, early stopping on validation Recall@5, and
//! parameter accounting for freeze policies.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::GeoImage;
use crate::error::{Error, Result};
use crate::gradcheck::{batch_loss, TripletImages};
use crate::index::{haversine_m, judge_match, MatchThresholds};
use crate::loss::{euclidean, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::params::{Gradients, ParamGroup};
use crate::rng::seeded_rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Geometric and pool-size knobs for triplet mining.
#[derive(Debug, Clone)]
pub struct MiningConfig {
    /// Images at most this far away may serve as positives.
    pub positive_radius_m: f64,
    /// Images must be farther than this to count as negatives.
    pub negative_radius_m: f64,
    /// Upper bound on the random negative sample ranked per query.
    pub negative_pool: usize,
    /// How many hardest negatives each triplet keeps.
    pub hard_negatives: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            positive_radius_m: 10.0,
            negative_radius_m: 25.0,
            negative_pool: 1000,
            hard_negatives: 2,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_radius_m > 0.0) {
            return Err(Error::invalid("positive radius must be positive"));
        }
        if self.negative_radius_m <= self.positive_radius_m {
            return Err(Error::invalid(
                "negative radius must exceed the positive radius",
            ));
        }
        if self.hard_negatives == 0 {
            return Err(Error::invalid("need at least one hard negative"));
        }
        if self.negative_pool < self.hard_negatives {
            return Err(Error::invalid(
                "negative pool smaller than the number of hard negatives",
            ));
        }
        Ok(())
    }
}

/// Optimization schedule. `freeze_policy` holds parameter-group names
/// ("backbone", "adapters", "local_head", "gem") excluded from updates.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    /// Queries sampled (with replacement) per epoch.
    pub epoch_queries: usize,
    /// Epochs without validation R@5 improvement before stopping.
    pub patience_epochs: usize,
    /// Hard cap on epochs regardless of the stopper.
    pub max_epochs: usize,
    pub seed: u64,
    pub freeze_policy: BTreeSet<String>,
}

impl TrainConfig {
    /// Defaults for the small-scale preset: everything but the dataset pass
    /// count matches the full-scale schedule.
    pub fn desk_default(seed: u64, model: &ModelConfig) -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            epoch_queries: 512,
            patience_epochs: 3,
            max_epochs: 40,
            seed,
            freeze_policy: Self::default_freeze(model),
        }
    }

    /// The standard policy: adapters present means only they (plus the local
    /// head and a learnable pooling exponent) train.
    pub fn default_freeze(model: &ModelConfig) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        if model.backbone.adapter_mode != crate::backbone::AdapterMode::None {
            set.insert(ParamGroup::Backbone.name().to_string());
        }
        set
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.epoch_queries == 0 {
            return Err(Error::invalid("batch size and epoch queries must be >= 1"));
        }
        if self.patience_epochs == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("patience and max epochs must be >= 1"));
        }
        let known = ["backbone", "adapters", "local_head", "gem"];
        for name in &self.freeze_policy {
            if !known.contains(&name.as_str()) {
                return Err(Error::invalid(format!("unknown parameter group {name:?}")));
            }
        }
        if model.backbone.adapter_mode != crate::backbone::AdapterMode::None
            && !self.freeze_policy.contains("backbone")
        {
            return Err(Error::invalid(
                "adapters are enabled, so the freeze policy must include \"backbone\"",
            ));
        }
        Ok(())
    }
}

/// One mined triplet, as indices into the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Mines one triplet for `query`. The positive is the geographically valid
/// image nearest in feature space; negatives are the hardest few from a
/// seeded sample of definite negatives. Returns None when the query lacks a
/// positive or enough negatives.
pub fn mine_triplet(
    query: usize,
    set: &[GeoImage],
    features: &[Vec<f64>],
    cfg: &MiningConfig,
    rng: &mut impl Rng,
) -> Option<Triplet> {
    debug_assert_eq!(set.len(), features.len());
    let q = &set[query];
    let qf = &features[query];

    let mut positive: Option<(f64, usize)> = None;
    let mut negative_ids: Vec<usize> = Vec::new();
    for (i, r) in set.iter().enumerate() {
        if i == query {
            continue;
        }
        let geo = haversine_m(q.lat, q.lon, r.lat, r.lon);
        if geo <= cfg.positive_radius_m {
            let d = euclidean(qf, &features[i]);
            // Strict < keeps the lowest index on ties.
            if positive.map_or(true, |(best, _)| d < best) {
                positive = Some((d, i));
            }
        } else if geo > cfg.negative_radius_m {
            negative_ids.push(i);
        }
    }
    let (_, positive) = positive?;
    if negative_ids.len() < cfg.hard_negatives {
        return None;
    }

    let pool = cfg.negative_pool.min(negative_ids.len());
    let mut sampled: Vec<usize> = rand::seq::index::sample(rng, negative_ids.len(), pool)
        .into_iter()
        .map(|j| negative_ids[j])
        .collect();
    sampled.sort_unstable();
    let mut ranked: Vec<(f64, usize)> = sampled
        .into_iter()
        .map(|i| (euclidean(qf, &features[i]), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let negatives: Vec<usize> = ranked
        .into_iter()
        .take(cfg.hard_negatives)
        .map(|(_, i)| i)
        .collect();

    Some(Triplet {
        query,
        positive,
        negatives,
    })
}

/// Adam first/second moment buffers, keyed by parameter name. Frozen groups
/// never get a slot.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }
}

/// The freeze policy with model-derived additions: a non-learnable pooling
/// exponent is always frozen.
pub fn effective_freeze(model: &ModelConfig, policy: &BTreeSet<String>) -> BTreeSet<String> {
    let mut set = policy.clone();
    if !model.gem_p_learnable {
        set.insert(ParamGroup::Gem.name().to_string());
    }
    set
}

fn first_non_finite<'g>(grads: &'g Gradients) -> Option<&'g str> {
    grads
        .iter()
        .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
        .map(|(n, _)| n)
}

/// One bias-corrected Adam update on the tunable groups. Missing gradient
/// entries count as zero (moments decay). Any non-finite gradient rejects
/// the whole step: parameters and state are left untouched.
pub fn adam_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    if let Some(name) = first_non_finite(grads) {
        return Err(Error::NonFiniteGradient(format!(
            "gradient for {name} is not finite; step rejected"
        )));
    }
    // Validate shapes before mutating anything.
    let mut shape_err: Option<Error> = None;
    model.for_each_param(|name, group, _, values| {
        if shape_err.is_some() || frozen.contains(group.name()) {
            return;
        }
        if let Some(g) = grads.get(name) {
            if g.len() != values.len() {
                shape_err = Some(Error::shape(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    values.len()
                )));
            }
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }

    state.step += 1;
    let t = state.step as i32;
    let mc = 1.0 - beta1.powi(t);
    let vc = 1.0 - beta2.powi(t);
    let m = &mut state.m;
    let v = &mut state.v;
    model.for_each_param_mut(|name, group, values| {
        if frozen.contains(group.name()) {
            return;
        }
        let g = grads.get(name);
        let m = m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; values.len()]);
        let v = v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; values.len()]);
        for i in 0..values.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            values[i] -= lr * (m[i] / mc) / ((v[i] / vc).sqrt() + eps);
        }
    });
    Ok(())
}

/// Tracks the best validation value; ties count as no improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    stale: usize,
    best: Option<f64>,
    best_epoch: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StopCheck {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            stale: 0,
            best: None,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopCheck {
        let improved = self.best.map_or(true, |b| value > b);
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopCheck {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best
    }
}

/// Parameter counts under a freeze policy.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub total_params: usize,
    pub tunable_params: usize,
    pub frozen_params: usize,
    /// Per-group (name, count, frozen) rows, sorted by name.
    pub groups: Vec<(String, usize, bool)>,
}

pub fn count_parameters(model: &Model, policy: &BTreeSet<String>) -> ParamReport {
    let frozen_set = effective_freeze(&model.config, policy);
    let mut per_group: std::collections::BTreeMap<&'static str, usize> = Default::default();
    model.for_each_param(|_, group, _, values| {
        *per_group.entry(group.name()).or_insert(0) += values.len();
    });
    let mut total = 0;
    let mut tunable = 0;
    let mut frozen = 0;
    let mut groups = Vec::new();
    for (name, count) in per_group {
        let is_frozen = frozen_set.contains(name);
        total += count;
        if is_frozen {
            frozen += count;
        } else {
            tunable += count;
        }
        groups.push((name.to_string(), count, is_frozen));
    }
    ParamReport {
        total_params: total,
        tunable_params: tunable,
        frozen_params: frozen,
        groups,
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r1: f64,
    pub val_r5: f64,
    pub wall_seconds: f64,
    pub skipped_queries: usize,
    pub rejected_steps: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Checkpoint from the epoch with the best validation R@5.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_r5: f64,
    pub history: Vec<EpochStats>,
}

/// Writes the history as CSV: epoch, train loss, validation R@1/R@5
/// (percent), and wall time per epoch.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_loss,val_r1,val_r5,wall_seconds")?;
    for s in history {
        writeln!(
            w,
            "{},{:.6},{:.4},{:.4},{:.3}",
            s.epoch, s.train_loss, s.val_r1, s.val_r5, s.wall_seconds
        )?;
    }
    w.flush()?;
    Ok(())
}

fn extract_globals(model: &Model, set: &[GeoImage]) -> Result<Vec<Vec<f64>>> {
    set.par_iter()
        .map(|g| model.extract_global(&g.image))
        .collect()
}

/// Recall@N of plain global retrieval: `queries` ranked against `db` by
/// feature distance (ties by id), judged with `thresholds`. Percentages.
pub fn evaluate_global_recall(
    model: &Model,
    db: &[GeoImage],
    queries: &[GeoImage],
    thresholds: &MatchThresholds,
    ns: &[usize],
) -> Result<Vec<(usize, f64)>> {
    thresholds.validate()?;
    if db.is_empty() || queries.is_empty() {
        return Err(Error::invalid("recall needs a database and queries"));
    }
    let db_feats = extract_globals(model, db)?;
    let q_feats = extract_globals(model, queries)?;
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 {
            return Err(Error::invalid("recall is undefined at N = 0"));
        }
        let mut correct = 0usize;
        for (q, qf) in queries.iter().zip(&q_feats) {
            let mut order: Vec<usize> = (0..db.len()).collect();
            order.sort_by(|&a, &b| {
                euclidean(qf, &db_feats[a])
                    .total_cmp(&euclidean(qf, &db_feats[b]))
                    .then(db[a].id.cmp(&db[b].id))
            });
            let hit = order.iter().take(n).any(|&i| {
                judge_match(
                    (q.lat, q.lon),
                    q.heading,
                    (db[i].lat, db[i].lon),
                    db[i].heading,
                    thresholds,
                )
            });
            if hit {
                correct += 1;
            }
        }
        out.push((n, 100.0 * correct as f64 / queries.len() as f64));
    }
    Ok(out)
}

/// Runs the fine-tuning loop. Each epoch refreshes the mining features,
/// samples `epoch_queries` queries, mines triplets, and takes one Adam step
/// per batch; validation R@5 drives early stopping. `model` is left at its
/// final state; the returned outcome carries the best checkpoint.
pub fn train(
    model: &mut Model,
    train_set: &[GeoImage],
    val_db: &[GeoImage],
    val_queries: &[GeoImage],
    cfg: &TrainConfig,
    mining: &MiningConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate(&model.config)?;
    mining.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if val_db.is_empty() || val_queries.is_empty() {
        return Err(Error::invalid("validation needs a database and queries"));
    }

    let frozen = effective_freeze(&model.config, &cfg.freeze_policy);
    let thresholds = MatchThresholds::default();
    let mut stopper = EarlyStopper::new(cfg.patience_epochs);
    let mut adam = AdamState::new();
    let mut best: Option<Model> = None;
    let mut best_epoch = 0;
    let mut best_r5 = 0.0;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let features = extract_globals(model, train_set)?;
        let mut rng = seeded_rng(cfg.seed, &format!("train.epoch{epoch}"));

        let mut triplets = Vec::new();
        let mut skipped = 0usize;
        for _ in 0..cfg.epoch_queries {
            let query = rng.gen_range(0..train_set.len());
            match mine_triplet(query, train_set, &features, mining, &mut rng) {
                Some(t) => triplets.push(t),
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::debug!("epoch {epoch}: skipped {skipped} queries with no usable triplet");
        }
        for t in &triplets {
            let q = &train_set[t.query];
            let p = &train_set[t.positive];
            assert!(
                haversine_m(q.lat, q.lon, p.lat, p.lon) <= mining.positive_radius_m,
                "mined positive violates the distance bound"
            );
            for &n in &t.negatives {
                let r = &train_set[n];
                assert!(
                    haversine_m(q.lat, q.lon, r.lat, r.lon) > mining.negative_radius_m,
                    "mined negative violates the distance bound"
                );
            }
        }

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut rejected = 0usize;
        for chunk in triplets.chunks(cfg.batch_size) {
            let batch: Vec<TripletImages> = chunk
                .iter()
                .map(|t| TripletImages {
                    query: train_set[t.query].image.clone(),
                    positive: train_set[t.positive].image.clone(),
                    negatives: t
                        .negatives
                        .iter()
                        .map(|&n| train_set[n].image.clone())
                        .collect(),
                })
                .collect();
            let mut grads = Gradients::new();
            let probe = batch_loss(model, &batch, loss_cfg, 0.0, Some(&mut grads))?;
            if !probe.value.is_finite() {
                rejected += 1;
                log::warn!("epoch {epoch}: non-finite batch loss; step rejected");
                continue;
            }
            match adam_step(
                model,
                &grads,
                &mut adam,
                cfg.learning_rate,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
                &frozen,
            ) {
                Ok(()) => {
                    loss_sum += probe.value;
                    batches += 1;
                }
                Err(Error::NonFiniteGradient(msg)) => {
                    rejected += 1;
                    log::warn!("epoch {epoch}: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / batches.max(1) as f64;

        let recalls = evaluate_global_recall(model, val_db, val_queries, &thresholds, &[1, 5])?;
        let val_r1 = recalls[0].1;
        let val_r5 = recalls[1].1;

        let check = stopper.observe(epoch, val_r5);
        if check.improved {
            best = Some(model.clone());
            best_epoch = epoch;
            best_r5 = val_r5;
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_r1,
            val_r5,
            wall_seconds: start.elapsed().as_secs_f64(),
            skipped_queries: skipped,
            rejected_steps: rejected,
        });
        log::info!(
            "epoch {epoch}: loss {train_loss:.6}, val R@1 {val_r1:.2}, val R@5 {val_r5:.2}"
        );
        if check.stop {
            break;
        }
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        best_epoch,
        best_val_r5: best_r5,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AdapterMode, BackboneConfig};
    use crate::dataset::split_from_world;
    use crate::heads::{GlobalMode, GEM_CLAMP_EPS};
    use crate::manifest::Split;
    use crate::tensor::Tensor;
    use crate::world::{generate_synth_world, SynthWorldConfig};

    fn geo_point(id: u64, north_m: f64, feature: Vec<f64>) -> (GeoImage, Vec<f64>) {
        let deg_per_m = 180.0 / (std::f64::consts::PI * crate::index::EARTH_RADIUS_M);
        (
            GeoImage {
                id,
                lat: north_m * deg_per_m,
                lon: 0.0,
                heading: None,
                image: Tensor::zeros(&[1, 1, 3]),
            },
            feature,
        )
    }

    // Query at 0 m; positives at 5 m; negatives at 30+ m.
    fn mining_fixture() -> (Vec<GeoImage>, Vec<Vec<f64>>) {
        let pts = vec![
            geo_point(0, 0.0, vec![0.0, 0.0]),
            geo_point(1, 5.0, vec![3.0, 0.0]),
            geo_point(2, -5.0, vec![0.0, 0.0]),
            geo_point(3, 30.0, vec![1.0, 0.0]),
            geo_point(4, 40.0, vec![1.0, 0.0]),
            geo_point(5, 50.0, vec![1.0, 0.0]),
            geo_point(6, -35.0, vec![5.0, 0.0]),
        ];
        pts.into_iter().unzip()
    }

    #[test]
    fn positive_with_zero_feature_distance_is_selected() {
        let (set, feats) = mining_fixture();
        let cfg = MiningConfig::default();
        let mut rng = seeded_rng(1, "mine");
        let t = mine_triplet(0, &set, &feats, &cfg, &mut rng).unwrap();
        assert_eq!(t.positive, 2);
    }

    #[test]
    fn equidistant_negatives_resolve_to_lowest_indices() {
        let (set, feats) = mining_fixture();
        let cfg = MiningConfig {
            hard_negatives: 2,
            ..MiningConfig::default()
        };
        for seed in 0..5 {
            let mut rng = seeded_rng(seed, "mine");
            let t = mine_triplet(0, &set, &feats, &cfg, &mut rng).unwrap();
            // 3, 4, 5 are all at feature distance 1; 6 is farther.
            assert_eq!(t.negatives, vec![3, 4]);
        }
    }

    #[test]
    fn mining_respects_geometry_and_skips_hopeless_queries() {
        let (set, feats) = mining_fixture();
        let cfg = MiningConfig::default();
        let mut rng = seeded_rng(2, "mine");
        for q in 0..set.len() {
            if let Some(t) = mine_triplet(q, &set, &feats, &cfg, &mut rng) {
                let qi = &set[q];
                let p = &set[t.positive];
                assert!(haversine_m(qi.lat, qi.lon, p.lat, p.lon) <= cfg.positive_radius_m);
                for &n in &t.negatives {
                    let r = &set[n];
                    assert!(haversine_m(qi.lat, qi.lon, r.lat, r.lon) > cfg.negative_radius_m);
                }
            } else {
                // Only the far-out points lack a positive within 10 m.
                assert!(q >= 3, "query {q} should have mined a triplet");
            }
        }
    }

    #[test]
    fn mining_is_deterministic_for_a_fixed_seed() {
        let (set, feats) = mining_fixture();
        let cfg = MiningConfig {
            negative_pool: 2,
            ..MiningConfig::default()
        };
        let run = || -> Vec<Option<Triplet>> {
            let mut rng = seeded_rng(9, "mine");
            (0..set.len())
                .map(|q| mine_triplet(q, &set, &feats, &cfg, &mut rng))
                .collect()
        };
        assert_eq!(run(), run());
    }

    fn tiny_model(adapter_mode: AdapterMode, gem_learnable: bool) -> Model {
        let config = ModelConfig {
            backbone: BackboneConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 8,
                num_blocks: 2,
                num_heads: 2,
                adapter_mode,
                bottleneck_ratio: 0.5,
                adapter_scale: 0.2,
                ln_eps: 1e-6,
            },
            head_mid_channels: 6,
            head_out_channels: 4,
            global_mode: GlobalMode::Gem,
            gem_p_init: 3.0,
            gem_p_learnable: gem_learnable,
            gem_eps: GEM_CLAMP_EPS,
        };
        Model::init(config, 11).unwrap()
    }

    fn snapshot(model: &Model) -> Vec<(String, &'static str, Vec<f64>)> {
        let mut out = Vec::new();
        model.for_each_param(|name, group, _, values| {
            out.push((name.to_string(), group.name(), values.to_vec()))
        });
        out
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params_unchanged() {
        let mut model = tiny_model(AdapterMode::Both, true);
        let before = snapshot(&model);
        let mut grads = Gradients::new();
        grads.add("cls", &vec![0.0; model.config.backbone.embed_dim]);
        let mut state = AdamState::new();
        adam_step(
            &mut model,
            &grads,
            &mut state,
            1e-3,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(before, snapshot(&model));
        let (m, v) = state.moments("cls").unwrap();
        assert!(m.iter().chain(v).all(|&x| x == 0.0));
    }

    #[test]
    fn moments_decay_without_gradient() {
        let mut model = tiny_model(AdapterMode::Both, true);
        let mut state = AdamState::new();
        let mut grads = Gradients::new();
        grads.add_scalar("gem.p", 2.0);
        let frozen = BTreeSet::new();
        adam_step(
            &mut model, &grads, &mut state, 0.0, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, &frozen,
        )
        .unwrap();
        let m1 = state.moments("gem.p").unwrap().0[0];
        adam_step(
            &mut model,
            &Gradients::new(),
            &mut state,
            0.0,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            &frozen,
        )
        .unwrap();
        let m2 = state.moments("gem.p").unwrap().0[0];
        assert!((m2 - ADAM_BETA1 * m1).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_times_sign() {
        // With bias correction and a constant gradient g, m_hat = g and
        // v_hat = g^2 at every step, so each update is lr*g/(|g|+eps).
        let mut model = tiny_model(AdapterMode::Both, true);
        let mut state = AdamState::new();
        let mut grads = Gradients::new();
        grads.add_scalar("gem.p", -2.5);
        let lr = 1e-3;
        let frozen = BTreeSet::new();
        for _ in 0..50 {
            let before = model.gem_p;
            adam_step(
                &mut model, &grads, &mut state, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, &frozen,
            )
            .unwrap();
            let step = model.gem_p - before;
            assert!((step - lr).abs() < 1e-6 * lr, "step {step}");
        }
    }

    #[test]
    fn frozen_group_is_bit_identical_after_steps_with_nonzero_grads() {
        let mut model = tiny_model(AdapterMode::Both, true);
        let before = snapshot(&model);
        let mut grads = Gradients::new();
        grads.add("cls", &vec![0.7; model.config.backbone.embed_dim]);
        grads.add_scalar("gem.p", 1.0);
        let mut state = AdamState::new();
        let frozen: BTreeSet<String> = ["backbone".to_string()].into();
        for _ in 0..3 {
            adam_step(
                &mut model, &grads, &mut state, 1e-2, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, &frozen,
            )
            .unwrap();
        }
        for ((name, _, old), (_, _, new)) in before.iter().zip(snapshot(&model).iter()) {
            if name == "cls" {
                assert_eq!(old, new, "frozen cls moved");
            }
        }
        assert!(state.moments("cls").is_none());
        assert_ne!(model.gem_p, 3.0);
    }

    #[test]
    fn non_finite_gradient_rejects_the_step() {
        let mut model = tiny_model(AdapterMode::Both, true);
        let before = snapshot(&model);
        let mut grads = Gradients::new();
        grads.add_scalar("gem.p", f64::NAN);
        let mut state = AdamState::new();
        let err = adam_step(
            &mut model,
            &grads,
            &mut state,
            1e-2,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            &BTreeSet::new(),
        );
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
        assert_eq!(before, snapshot(&model));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn stopper_trace_matches_hand_computation() {
        // Patience 3 over [50, 60, 60, 60, 60]: improvement at epochs 1 and
        // 2, then three stale epochs, stopping after epoch 5 with the best
        // checkpoint at epoch 2.
        let mut stopper = EarlyStopper::new(3);
        let values = [50.0, 60.0, 60.0, 60.0, 60.0];
        let mut stopped_at = None;
        for (i, &v) in values.iter().enumerate() {
            let check = stopper.observe(i + 1, v);
            assert_eq!(check.improved, i < 2);
            if check.stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(stopper.best_epoch(), 2);
        assert_eq!(stopper.best_value(), Some(60.0));
    }

    #[test]
    fn param_report_splits_by_freeze_policy() {
        let model = tiny_model(AdapterMode::Both, false);
        let policy: BTreeSet<String> = ["backbone".to_string()].into();
        let report = count_parameters(&model, &policy);
        assert_eq!(
            report.total_params,
            report.tunable_params + report.frozen_params
        );
        assert_eq!(report.total_params, model.num_params());
        // Adapters plus the head are a small fraction of the model.
        assert!(report.tunable_params * 2 < report.total_params);
        // gem is frozen because p is not learnable here.
        let gem = report.groups.iter().find(|(n, _, _)| n == "gem").unwrap();
        assert!(gem.2);
    }

    #[test]
    fn nothing_frozen_means_everything_tunable() {
        let model = tiny_model(AdapterMode::None, true);
        let report = count_parameters(&model, &BTreeSet::new());
        assert_eq!(report.tunable_params, report.total_params);
        assert_eq!(report.frozen_params, 0);
    }

    fn tiny_world() -> crate::world::SynthWorld {
        let config = SynthWorldConfig {
            num_places: 4,
            variants_per_place: 8,
            aliasing_pairs: 1,
            image_size: 8,
            seed: 23,
            ..SynthWorldConfig::default()
        };
        generate_synth_world(&config).unwrap()
    }

    fn tiny_train_config(model: &Model) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            epoch_queries: 6,
            patience_epochs: 2,
            max_epochs: 3,
            seed: 5,
            freeze_policy: TrainConfig::default_freeze(&model.config),
        }
    }

    #[test]
    fn training_keeps_frozen_params_and_returns_a_best_checkpoint() {
        let world = tiny_world();
        let train_set = split_from_world(&world, Split::Train);
        let val_db = split_from_world(&world, Split::Database);
        let val_q = split_from_world(&world, Split::Val);
        let mut model = tiny_model(AdapterMode::Both, false);
        let before = snapshot(&model);
        let cfg = tiny_train_config(&model);
        let outcome = train(
            &mut model,
            &train_set,
            &val_db,
            &val_q,
            &cfg,
            &MiningConfig::default(),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(!outcome.history.is_empty());
        assert!(outcome.history.len() <= cfg.max_epochs);
        assert!(outcome.best_epoch >= 1);
        for s in &outcome.history {
            assert!(s.train_loss.is_finite());
            assert_eq!(s.rejected_steps, 0);
        }
        // Backbone stays bit-identical in both the final and best models.
        for final_model in [&model, &outcome.best] {
            let after = snapshot(final_model);
            for ((name, group, old), (_, _, new)) in before.iter().zip(after.iter()) {
                if *group == "backbone" {
                    assert_eq!(old, new, "frozen param {name} moved");
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing_and_stops_at_one_plus_patience() {
        let world = tiny_world();
        let train_set = split_from_world(&world, Split::Train);
        let val_db = split_from_world(&world, Split::Database);
        let val_q = split_from_world(&world, Split::Val);
        let mut model = tiny_model(AdapterMode::Both, false);
        let before = snapshot(&model);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 10,
            ..tiny_train_config(&model)
        };
        let outcome = train(
            &mut model,
            &train_set,
            &val_db,
            &val_q,
            &cfg,
            &MiningConfig::default(),
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(before, snapshot(&model));
        assert_eq!(outcome.history.len(), 1 + cfg.patience_epochs);
        assert_eq!(outcome.best_epoch, 1);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let world = tiny_world();
        let train_set = split_from_world(&world, Split::Train);
        let val_db = split_from_world(&world, Split::Database);
        let val_q = split_from_world(&world, Split::Val);
        let run = || {
            let mut model = tiny_model(AdapterMode::Both, false);
            let cfg = TrainConfig {
                max_epochs: 2,
                ..tiny_train_config(&model)
            };
            train(
                &mut model,
                &train_set,
                &val_db,
                &val_q,
                &cfg,
                &MiningConfig::default(),
                &LossConfig::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_r5.to_bits(), y.val_r5.to_bits());
        }
    }

    #[test]
    fn history_csv_has_the_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = vec![EpochStats {
            epoch: 1,
            train_loss: 0.25,
            val_r1: 50.0,
            val_r5: 75.0,
            wall_seconds: 1.5,
            skipped_queries: 0,
            rejected_steps: 0,
        }];
        write_history_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,val_r1,val_r5,wall_seconds"
        );
        assert!(lines.next().unwrap().starts_with("1,0.250000,50.0000,75.0000,"));
    }
}
