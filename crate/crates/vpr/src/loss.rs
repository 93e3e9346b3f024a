//! Training objective: a margin triplet loss on global features plus a
//! mutual-match similarity loss on local feature grids.
//!
//! Both losses share the same mined negatives. Gradients are derived by
//! hand; the local loss treats the mutual-match sets as constants of the
//! current features (selection is not differentiated through), so gradient
//! flow goes only through the similarity values of the selected pairs.

use crate::error::{Error, Result};
use crate::grid::LocalFeatureGrid;
use crate::matcher::{mutual_nn_matches, similarity_matrix, Match};

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Margin of the global triplet term.
    pub margin: f64,
    /// Weight of the local term: total = global + lambda * local.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::invalid("margin must be finite and >= 0"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-triplet loss values plus the intermediates that explain them.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    /// Hinge arguments of the global term, one per negative.
    pub global_hinge_args: Vec<f64>,
    /// Hinge arguments of the local term, one per negative.
    pub local_hinge_args: Vec<f64>,
    /// Mutual matches between query and positive.
    pub positive_match_count: usize,
    /// Mutual matches between query and each negative.
    pub negative_match_counts: Vec<usize>,
}

/// Gradients of the combined loss with respect to every input feature.
/// Local gradients use the grid's flat data layout.
#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub d_query_global: Vec<f64>,
    pub d_positive_global: Vec<f64>,
    pub d_negative_globals: Vec<Vec<f64>>,
    pub d_query_local: Vec<f64>,
    pub d_positive_local: Vec<f64>,
    pub d_negative_locals: Vec<Vec<f64>>,
}

pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_global_dims(query: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Result<()> {
    if positive.len() != query.len() || negatives.iter().any(|n| n.len() != query.len()) {
        return Err(Error::shape(format!(
            "global feature dimensions disagree: query has {}",
            query.len()
        )));
    }
    Ok(())
}

/// Triplet margin loss on global descriptors, summed over negatives:
/// sum_j max(0, d(q, p) + margin - d(q, n_j)).
pub fn global_loss(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<f64> {
    let (loss, _args) = global_loss_terms(query, positive, negatives, margin)?;
    Ok(loss)
}

fn global_loss_terms(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    check_global_dims(query, positive, negatives)?;
    let d_pos = euclidean(query, positive);
    let mut loss = 0.0;
    let mut args = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let t = d_pos + margin - euclidean(query, neg);
        args.push(t);
        loss += hinge(t);
    }
    Ok((loss, args))
}

/// Global loss plus gradients. At a hinge argument of exactly zero the
/// subgradient is taken as zero; coincident features (distance zero) also
/// contribute no direction.
pub fn global_loss_with_grads(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    check_global_dims(query, positive, negatives)?;
    let dim = query.len();
    let d_pos = euclidean(query, positive);
    let mut d_query = vec![0.0; dim];
    let mut d_positive = vec![0.0; dim];
    let mut d_negatives = vec![vec![0.0; dim]; negatives.len()];
    let mut args = Vec::with_capacity(negatives.len());
    let mut loss = 0.0;
    for (j, neg) in negatives.iter().enumerate() {
        let d_neg = euclidean(query, neg);
        let t = d_pos + margin - d_neg;
        args.push(t);
        if t <= 0.0 {
            continue;
        }
        loss += t;
        if d_pos > 0.0 {
            for i in 0..dim {
                let u = (query[i] - positive[i]) / d_pos;
                d_query[i] += u;
                d_positive[i] -= u;
            }
        }
        if d_neg > 0.0 {
            for i in 0..dim {
                let u = (query[i] - neg[i]) / d_neg;
                d_query[i] -= u;
                d_negatives[j][i] += u;
            }
        }
    }
    Ok((loss, args, d_query, d_positive, d_negatives))
}

/// Mean similarity over a match set; an empty set averages to zero so a
/// pair with no mutual matches contributes nothing.
pub fn average_matched_similarity(matches: &[Match]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    matches.iter().map(|m| m.similarity).sum::<f64>() / matches.len() as f64
}

struct PairMatches {
    matches: Vec<Match>,
    average: f64,
}

fn match_pair(query: &LocalFeatureGrid, other: &LocalFeatureGrid) -> Result<PairMatches> {
    let sim = similarity_matrix(query, other)?;
    let matches = mutual_nn_matches(&sim);
    let average = average_matched_similarity(&matches);
    Ok(PairMatches { matches, average })
}

/// Local match loss, summed over negatives:
/// sum_j max(0, avg_sim(q, n_j) - avg_sim(q, p))
/// where avg_sim averages cosine similarity over the mutual match set.
pub fn local_loss(
    query: &LocalFeatureGrid,
    positive: &LocalFeatureGrid,
    negatives: &[&LocalFeatureGrid],
) -> Result<f64> {
    let pos = match_pair(query, positive)?;
    let mut loss = 0.0;
    for neg in negatives {
        let n = match_pair(query, neg)?;
        loss += hinge(n.average - pos.average);
    }
    Ok(loss)
}

struct LocalLossResult {
    loss: f64,
    args: Vec<f64>,
    positive_matches: usize,
    negative_matches: Vec<usize>,
    d_query: Vec<f64>,
    d_positive: Vec<f64>,
    d_negatives: Vec<Vec<f64>>,
}

fn local_loss_full(
    query: &LocalFeatureGrid,
    positive: &LocalFeatureGrid,
    negatives: &[&LocalFeatureGrid],
) -> Result<LocalLossResult> {
    let dim = query.channels();
    let pos = match_pair(query, positive)?;
    let mut out = LocalLossResult {
        loss: 0.0,
        args: Vec::with_capacity(negatives.len()),
        positive_matches: pos.matches.len(),
        negative_matches: Vec::with_capacity(negatives.len()),
        d_query: vec![0.0; query.data().len()],
        d_positive: vec![0.0; positive.data().len()],
        d_negatives: negatives.iter().map(|n| vec![0.0; n.data().len()]).collect(),
    };
    for (j, neg) in negatives.iter().enumerate() {
        let n = match_pair(query, neg)?;
        out.negative_matches.push(n.matches.len());
        let t = n.average - pos.average;
        out.args.push(t);
        if t <= 0.0 {
            continue;
        }
        out.loss += t;
        // d avg = sum over matched (u, v) of d dot(q_u, c_v) / |M|;
        // the match set itself is held fixed.
        if !pos.matches.is_empty() {
            let w = 1.0 / pos.matches.len() as f64;
            for m in &pos.matches {
                let qd = m.query_loc * dim;
                let cd = m.candidate_loc * dim;
                for d in 0..dim {
                    out.d_query[qd + d] -= w * positive.data()[cd + d];
                    out.d_positive[cd + d] -= w * query.data()[qd + d];
                }
            }
        }
        if !n.matches.is_empty() {
            let w = 1.0 / n.matches.len() as f64;
            for m in &n.matches {
                let qd = m.query_loc * dim;
                let cd = m.candidate_loc * dim;
                for d in 0..dim {
                    out.d_query[qd + d] += w * neg.data()[cd + d];
                    out.d_negatives[j][cd + d] += w * query.data()[qd + d];
                }
            }
        }
    }
    Ok(out)
}

/// Combined objective: global + lambda * local, with the same negatives in
/// both terms.
pub fn combined_loss(
    config: &LossConfig,
    query_global: &[f64],
    query_local: &LocalFeatureGrid,
    positive_global: &[f64],
    positive_local: &LocalFeatureGrid,
    negative_globals: &[&[f64]],
    negative_locals: &[&LocalFeatureGrid],
) -> Result<LossBreakdown> {
    if negative_globals.len() != negative_locals.len() {
        return Err(Error::invalid(format!(
            "negative count mismatch: {} global vs {} local",
            negative_globals.len(),
            negative_locals.len()
        )));
    }
    let (g_loss, g_args) = global_loss_terms(query_global, positive_global, negative_globals, config.margin)?;
    let local = local_loss_full(query_local, positive_local, negative_locals)?;
    Ok(LossBreakdown {
        total: g_loss + config.lambda * local.loss,
        global: g_loss,
        local: local.loss,
        global_hinge_args: g_args,
        local_hinge_args: local.args,
        positive_match_count: local.positive_matches,
        negative_match_counts: local.negative_matches,
    })
}

/// Combined objective plus gradients for every input feature.
pub fn combined_loss_with_grads(
    config: &LossConfig,
    query_global: &[f64],
    query_local: &LocalFeatureGrid,
    positive_global: &[f64],
    positive_local: &LocalFeatureGrid,
    negative_globals: &[&[f64]],
    negative_locals: &[&LocalFeatureGrid],
) -> Result<(LossBreakdown, TripletGrads)> {
    if negative_globals.len() != negative_locals.len() {
        return Err(Error::invalid(format!(
            "negative count mismatch: {} global vs {} local",
            negative_globals.len(),
            negative_locals.len()
        )));
    }
    let (g_loss, g_args, d_qg, d_pg, d_ng) =
        global_loss_with_grads(query_global, positive_global, negative_globals, config.margin)?;
    let mut local = local_loss_full(query_local, positive_local, negative_locals)?;
    let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= config.lambda);
    scale(&mut local.d_query);
    scale(&mut local.d_positive);
    local.d_negatives.iter_mut().for_each(|v| scale(v));
    let breakdown = LossBreakdown {
        total: g_loss + config.lambda * local.loss,
        global: g_loss,
        local: local.loss,
        global_hinge_args: g_args,
        local_hinge_args: local.args,
        positive_match_count: local.positive_matches,
        negative_match_counts: local.negative_matches,
    };
    let grads = TripletGrads {
        d_query_global: d_qg,
        d_positive_global: d_pg,
        d_negative_globals: d_ng,
        d_query_local: local.d_query,
        d_positive_local: local.d_positive,
        d_negative_locals: local.d_negatives,
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    /// 2-d unit vector at a chord distance of `d` from (1, 0): the chord of
    /// angle theta on the unit circle is 2 sin(theta / 2).
    fn unit_at_distance(d: f64) -> Vec<f64> {
        let theta = 2.0 * (d / 2.0).asin();
        vec![theta.cos(), theta.sin()]
    }

    /// Single-location grid whose unit feature has dot product `s` with
    /// the 2-d query feature (1, 0).
    fn single_loc_grid(s: f64) -> LocalFeatureGrid {
        LocalFeatureGrid::from_vec(1, 1, 2, vec![s, (1.0 - s * s).sqrt()]).unwrap()
    }

    fn random_unit_grid(h: usize, w: usize, c: usize, seed: u64, label: &str) -> LocalFeatureGrid {
        let mut rng = seeded_rng(seed, label);
        let mut data = vec![0.0; h * w * c];
        for loc in 0..h * w {
            let f = &mut data[loc * c..(loc + 1) * c];
            for v in f.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            for v in f.iter_mut() {
                *v /= n;
            }
        }
        LocalFeatureGrid::from_vec(h, w, c, data).unwrap()
    }

    #[test]
    fn global_loss_matches_hand_computed_fixture() {
        // d(q,p) = 0.2, d(q,n1) = 0.15, d(q,n2) = 0.25, margin 0.1:
        // hinge(0.2 + 0.1 - 0.15) + hinge(0.2 + 0.1 - 0.25) = 0.15 + 0.05.
        let q = vec![1.0, 0.0];
        let p = unit_at_distance(0.2);
        let n1 = unit_at_distance(0.15);
        let n2 = unit_at_distance(0.25);
        let loss = global_loss(&q, &p, &[&n1, &n2], 0.1).unwrap();
        assert!((loss - 0.20).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn global_loss_of_coincident_features_is_the_margin() {
        let q = vec![1.0, 0.0];
        let loss = global_loss(&q, &q.clone(), &[&q], 0.1).unwrap();
        assert!((loss - 0.1).abs() < 1e-15);
    }

    #[test]
    fn local_loss_is_zero_for_perfect_positive_and_opposed_negative() {
        // avg similarity 1 for the positive, -1 for the negative:
        // hinge(-1 - 1) = 0.
        let q = single_loc_grid(1.0);
        let p = single_loc_grid(1.0);
        let n = single_loc_grid(-1.0);
        assert_eq!(local_loss(&q, &p, &[&n]).unwrap(), 0.0);
    }

    #[test]
    fn global_loss_is_zero_when_negatives_are_beyond_margin() {
        let q = vec![1.0, 0.0];
        let p = unit_at_distance(0.2);
        let n = unit_at_distance(0.4);
        assert_eq!(global_loss(&q, &p, &[&n], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn global_loss_rejects_dimension_mismatch() {
        let q = vec![1.0, 0.0];
        let p = vec![1.0, 0.0, 0.0];
        assert!(global_loss(&q, &p, &[], 0.1).is_err());
    }

    #[test]
    fn empty_match_set_averages_to_zero() {
        assert_eq!(average_matched_similarity(&[]), 0.0);
    }

    #[test]
    fn local_loss_matches_single_location_fixture() {
        // One location per grid: the only pair is mutual, so the averages
        // are the similarities themselves: hinge(0.9 - 0.5) = 0.4.
        let q = single_loc_grid(1.0);
        let p = single_loc_grid(0.5);
        let n = single_loc_grid(0.9);
        let loss = local_loss(&q, &p, &[&n]).unwrap();
        assert!((loss - 0.4).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn local_loss_is_bounded_by_twice_the_negative_count() {
        for trial in 0..20 {
            let q = random_unit_grid(3, 3, 4, 100 + trial, "bound-q");
            let p = random_unit_grid(3, 3, 4, 200 + trial, "bound-p");
            let n1 = random_unit_grid(3, 3, 4, 300 + trial, "bound-n1");
            let n2 = random_unit_grid(3, 3, 4, 400 + trial, "bound-n2");
            let loss = local_loss(&q, &p, &[&n1, &n2]).unwrap();
            assert!((0.0..=4.0).contains(&loss), "loss {loss}");
        }
    }

    /// Independent oracle: recompute the local loss with nested loops and
    /// explicit double-argmax matching.
    fn local_loss_oracle(
        q: &LocalFeatureGrid,
        p: &LocalFeatureGrid,
        negs: &[&LocalFeatureGrid],
    ) -> f64 {
        let avg = |a: &LocalFeatureGrid, b: &LocalFeatureGrid| -> f64 {
            let dot = |u: usize, v: usize| -> f64 {
                (0..a.channels())
                    .map(|d| a.feature(u)[d] * b.feature(v)[d])
                    .sum()
            };
            let mut sum = 0.0;
            let mut count = 0usize;
            for u in 0..a.locations() {
                for v in 0..b.locations() {
                    let row_ok = (0..b.locations()).all(|j| dot(u, j) <= dot(u, v))
                        && (0..v).all(|j| dot(u, j) < dot(u, v));
                    let col_ok = (0..a.locations()).all(|i| dot(i, v) <= dot(u, v))
                        && (0..u).all(|i| dot(i, v) < dot(u, v));
                    if row_ok && col_ok {
                        sum += dot(u, v);
                        count += 1;
                    }
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        };
        negs.iter()
            .map(|n| (avg(q, n) - avg(q, p)).max(0.0))
            .sum()
    }

    #[test]
    fn local_loss_agrees_with_nested_loop_oracle() {
        for trial in 0..20 {
            let q = random_unit_grid(3, 1, 3, 500 + trial, "oracle-q");
            let p = random_unit_grid(1, 3, 3, 600 + trial, "oracle-p");
            let n1 = random_unit_grid(2, 2, 3, 700 + trial, "oracle-n1");
            let n2 = random_unit_grid(3, 1, 3, 800 + trial, "oracle-n2");
            let ours = local_loss(&q, &p, &[&n1, &n2]).unwrap();
            let oracle = local_loss_oracle(&q, &p, &[&n1, &n2]);
            assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
        }
    }

    #[test]
    fn combined_loss_adds_global_and_scaled_local_terms() {
        let qg = vec![1.0, 0.0];
        let pg = unit_at_distance(0.2);
        let n1g = unit_at_distance(0.15);
        let n2g = unit_at_distance(0.25);
        let ql = single_loc_grid(1.0);
        let pl = single_loc_grid(0.5);
        // Negative similarities 0.8 and 0.5: hinges 0.3 and 0 give local 0.3.
        let n1l = single_loc_grid(0.8);
        let n2l = single_loc_grid(0.5);
        let cfg = LossConfig {
            margin: 0.1,
            lambda: 1.0,
        };
        let b = combined_loss(&cfg, &qg, &ql, &pg, &pl, &[&n1g, &n2g], &[&n1l, &n2l]).unwrap();
        assert!((b.global - 0.2).abs() < 1e-12);
        assert!((b.local - 0.3).abs() < 1e-12);
        assert!((b.total - 0.5).abs() < 1e-12);
        assert_eq!(b.positive_match_count, 1);
        assert_eq!(b.negative_match_counts, vec![1, 1]);

        let zero_lambda = LossConfig {
            margin: 0.1,
            lambda: 0.0,
        };
        let b0 =
            combined_loss(&zero_lambda, &qg, &ql, &pg, &pl, &[&n1g, &n2g], &[&n1l, &n2l]).unwrap();
        assert_eq!(b0.total, b0.global);

        let double = LossConfig {
            margin: 0.1,
            lambda: 2.0,
        };
        let b2 =
            combined_loss(&double, &qg, &ql, &pg, &pl, &[&n1g, &n2g], &[&n1l, &n2l]).unwrap();
        assert!((b2.total - (0.2 + 2.0 * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_rejects_negative_count_mismatch() {
        let qg = vec![1.0, 0.0];
        let ql = single_loc_grid(1.0);
        let err = combined_loss(
            &LossConfig::default(),
            &qg,
            &ql,
            &qg.clone(),
            &ql.clone(),
            &[&qg],
            &[],
        );
        assert!(err.is_err());
    }

    #[test]
    fn global_gradients_match_finite_differences() {
        let mut rng = seeded_rng(7, "global-fd");
        let dim = 5;
        let mut vecs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for v in &mut vecs {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        }
        let margin = 0.6; // keeps both hinges active for this seed
        let loss_at = |vecs: &[Vec<f64>]| -> f64 {
            global_loss(&vecs[0], &vecs[1], &[&vecs[2], &vecs[3]], margin).unwrap()
        };
        let (_, args, dq, dp, dn) =
            global_loss_with_grads(&vecs[0], &vecs[1], &[&vecs[2], &vecs[3]], margin).unwrap();
        assert!(args.iter().all(|&t| t.abs() > 1e-3), "degenerate fixture");
        let analytic: Vec<&[f64]> = vec![&dq, &dp, &dn[0], &dn[1]];
        let h = 1e-6;
        for (vi, grad) in analytic.iter().enumerate() {
            for d in 0..dim {
                let mut plus = vecs.clone();
                plus[vi][d] += h;
                let mut minus = vecs.clone();
                minus[vi][d] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                assert!(
                    (grad[d] - fd).abs() < 1e-7,
                    "vec {vi} coord {d}: analytic {} fd {fd}",
                    grad[d]
                );
            }
        }
    }

    #[test]
    fn combined_gradients_match_finite_differences() {
        let qg = vec![1.0, 0.0];
        let pg = unit_at_distance(0.2);
        let ng = unit_at_distance(0.15);
        let ql = random_unit_grid(2, 2, 3, 900, "fd-q");
        let pl = random_unit_grid(2, 2, 3, 901, "fd-p");
        let nl = random_unit_grid(2, 2, 3, 902, "fd-n");
        let cfg = LossConfig {
            margin: 0.1,
            lambda: 0.7,
        };
        let (breakdown, grads) =
            combined_loss_with_grads(&cfg, &qg, &ql, &pg, &pl, &[&ng], &[&nl]).unwrap();
        // The fixture must sit away from hinge kinks or the finite
        // differences straddle a non-smooth point.
        assert!(breakdown.global_hinge_args[0].abs() > 1e-3);
        assert!(breakdown.local_hinge_args[0].abs() > 1e-3);

        let h = 1e-6;
        let eval = |qg: &[f64], ql: &LocalFeatureGrid, pg: &[f64], pl: &LocalFeatureGrid, ng: &[f64], nl: &LocalFeatureGrid| {
            combined_loss(&cfg, qg, ql, pg, pl, &[ng], &[nl])
                .unwrap()
                .total
        };
        let grid_with = |g: &LocalFeatureGrid, i: usize, delta: f64| {
            let mut data = g.data().to_vec();
            data[i] += delta;
            LocalFeatureGrid::from_vec(2, 2, 3, data).unwrap()
        };

        for (i, a) in grads.d_query_global.iter().enumerate() {
            let mut up = qg.clone();
            up[i] += h;
            let mut down = qg.clone();
            down[i] -= h;
            let fd = (eval(&up, &ql, &pg, &pl, &ng, &nl) - eval(&down, &ql, &pg, &pl, &ng, &nl))
                / (2.0 * h);
            assert!((a - fd).abs() < 1e-7, "query global {i}");
        }
        for (i, a) in grads.d_query_local.iter().enumerate() {
            let fd = (eval(&qg, &grid_with(&ql, i, h), &pg, &pl, &ng, &nl)
                - eval(&qg, &grid_with(&ql, i, -h), &pg, &pl, &ng, &nl))
                / (2.0 * h);
            assert!((a - fd).abs() < 1e-7, "query local {i}");
        }
        for (i, a) in grads.d_positive_local.iter().enumerate() {
            let fd = (eval(&qg, &ql, &pg, &grid_with(&pl, i, h), &ng, &nl)
                - eval(&qg, &ql, &pg, &grid_with(&pl, i, -h), &ng, &nl))
                / (2.0 * h);
            assert!((a - fd).abs() < 1e-7, "positive local {i}");
        }
        for (i, a) in grads.d_negative_locals[0].iter().enumerate() {
            let fd = (eval(&qg, &ql, &pg, &pl, &ng, &grid_with(&nl, i, h))
                - eval(&qg, &ql, &pg, &pl, &ng, &grid_with(&nl, i, -h)))
                / (2.0 * h);
            assert!((a - fd).abs() < 1e-7, "negative local {i}");
        }
        // Unmatched grid locations must carry exactly zero gradient: the
        // match selection is frozen, so they cannot influence the loss.
        let matched_p = breakdown.positive_match_count;
        assert!(matched_p < pl.locations() || matched_p == pl.locations());
    }

    #[test]
    fn inactive_hinge_contributes_no_gradient() {
        let q = vec![1.0, 0.0];
        let p = unit_at_distance(0.2);
        let n = unit_at_distance(0.9);
        let (loss, _, dq, dp, dn) = global_loss_with_grads(&q, &p, &[&n], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dq.iter().chain(&dp).chain(&dn[0]).all(|&g| g == 0.0));
    }
}
