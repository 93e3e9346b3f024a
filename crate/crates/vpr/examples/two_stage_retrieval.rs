//! End-to-end retrieval: extract features for a synthetic world, build a
//! geo-tagged index from the database split, and answer queries in two
//! stages. Stage one ranks by global-descriptor distance; stage two
//! re-orders the top k by counting mutual nearest-neighbor local matches.

use vpr::dataset::split_from_world;
use vpr::features::{FeatureFile, FeatureRecord};
use vpr::index::{judge_match, two_stage_query, MatchThresholds, QueryFeatures, RerankMode};
use vpr::manifest::Split;
use vpr::model::{Model, ModelConfig};
use vpr::world::{generate_synth_world, SynthWorldConfig};

fn main() -> vpr::Result<()> {
    let world = generate_synth_world(&SynthWorldConfig {
        num_places: 6,
        aliasing_pairs: 2,
        seed: 7,
        ..SynthWorldConfig::default()
    })?;
    let model = Model::init(ModelConfig::desk(), 42)?;

    let mut file: Option<FeatureFile> = None;
    for g in split_from_world(&world, Split::Database) {
        let f = model.extract(&g.image)?;
        let record = FeatureRecord {
            id: g.id,
            lat: g.lat,
            lon: g.lon,
            heading: g.heading,
            global: f.global,
            local: f.local,
            patches: f.patches,
        };
        let file = file.get_or_insert_with(|| {
            FeatureFile::new(
                record.global.len(),
                (record.local.height(), record.local.width(), record.local.channels()),
                (record.patches.height(), record.patches.width(), record.patches.channels()),
            )
        });
        file.push(record)?;
    }
    let index = file.expect("database split is non-empty").build_index()?;
    println!("indexed {} database images", index.len());

    let thresholds = MatchThresholds::default();
    println!("query -> top-3 before and after re-ranking ('*' marks a correct place)");
    for q in split_from_world(&world, Split::Query).iter().take(6) {
        let f = model.extract(&q.image)?;
        let query = QueryFeatures {
            global: &f.global,
            local: Some(&f.local),
            patches: Some(&f.patches),
        };
        let show = |ids: &[u64]| -> String {
            ids.iter()
                .map(|&id| {
                    let r = index.record_by_id(id).unwrap();
                    let ok = judge_match((q.lat, q.lon), q.heading, (r.lat, r.lon), r.heading, &thresholds);
                    format!("{id}{}", if ok { "*" } else { "" })
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let global_only = two_stage_query(&index, &query, 10, RerankMode::None)?;
        let reranked = two_stage_query(&index, &query, 10, RerankMode::DenseLocal)?;
        let ids = |r: &vpr::index::QueryResult| r.hits.iter().take(3).map(|h| h.id).collect::<Vec<_>>();
        println!(
            "  query {:>4}: global [{}]  reranked [{}]  (top match count {})",
            q.id,
            show(&ids(&global_only)),
            show(&ids(&reranked)),
            reranked.hits[0].match_count
        );
    }
    Ok(())
}
