//! Geo-tagged feature database: exact global-feature search, two-stage
//! querying with local re-ranking, Recall@N evaluation and the index file
//! format.
//!
//! Search is exact brute force. Desk-scale databases are small, and
//! retrieval-quality comparisons must not be confounded by approximate
//! neighbours; the expensive stage this pipeline studies is re-ranking,
//! not candidate lookup.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::LocalFeatureGrid;
use crate::matcher::{rerank_order, rerank_score};
use crate::wire;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const INDEX_MAGIC: &[u8; 4] = b"SVPR";
pub const INDEX_VERSION: u32 = 1;
const INDEX_CONTEXT: &str = "index";

/// Great-circle distance in meters on a spherical Earth.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Smallest angle between two compass headings, in [0, 180].
pub fn heading_delta(h1: f64, h2: f64) -> f64 {
    let d = (h1 - h2).abs();
    d.min(360.0 - d)
}

fn check_coords(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::invalid(format!("coordinates out of range: ({lat}, {lon})")));
    }
    Ok(())
}

/// One database image: its identity, geotag and features. `patches` holds
/// the raw backbone token grid for the coarse re-ranking mode; it is kept
/// in memory only and never persisted in the index file.
#[derive(Debug, Clone)]
pub struct PlaceRecord {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub heading: Option<f64>,
    pub global: Vec<f64>,
    pub local: LocalFeatureGrid,
    pub patches: Option<LocalFeatureGrid>,
}

#[derive(Debug, Clone)]
pub struct PlaceIndex {
    global_dim: usize,
    local_h: usize,
    local_w: usize,
    local_dim: usize,
    records: Vec<PlaceRecord>,
}

impl PlaceIndex {
    pub fn new(global_dim: usize, local_h: usize, local_w: usize, local_dim: usize) -> PlaceIndex {
        PlaceIndex {
            global_dim,
            local_h,
            local_w,
            local_dim,
            records: Vec::new(),
        }
    }

    pub fn add(&mut self, record: PlaceRecord) -> Result<()> {
        check_coords(record.lat, record.lon)?;
        if record.global.len() != self.global_dim {
            return Err(Error::shape(format!(
                "record {} has a {}-dim global feature, index stores {}",
                record.id,
                record.global.len(),
                self.global_dim
            )));
        }
        let l = &record.local;
        if (l.height(), l.width(), l.channels()) != (self.local_h, self.local_w, self.local_dim) {
            return Err(Error::shape(format!(
                "record {} has a {}x{}x{} local grid, index stores {}x{}x{}",
                record.id,
                l.height(),
                l.width(),
                l.channels(),
                self.local_h,
                self.local_w,
                self.local_dim
            )));
        }
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::invalid(format!("duplicate record id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PlaceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn record_by_id(&self, id: u64) -> Option<&PlaceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        wire::write_u32(w, INDEX_VERSION)?;
        wire::write_u32(w, self.global_dim as u32)?;
        wire::write_u32(w, self.local_h as u32)?;
        wire::write_u32(w, self.local_w as u32)?;
        wire::write_u32(w, self.local_dim as u32)?;
        wire::write_u64(w, self.records.len() as u64)?;
        for r in &self.records {
            wire::write_u64(w, r.id)?;
            wire::write_f64(w, r.lat)?;
            wire::write_f64(w, r.lon)?;
            wire::write_f32(w, r.heading.map(|h| h as f32).unwrap_or(f32::NAN))?;
            wire::write_f32_slice(w, &r.global)?;
            wire::write_f32_slice(w, r.local.data())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PlaceIndex> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<PlaceIndex> {
        wire::expect_header(r, INDEX_CONTEXT, INDEX_MAGIC, INDEX_VERSION)?;
        let global_dim = wire::read_u32(r, INDEX_CONTEXT, "global dim")? as usize;
        let local_h = wire::read_u32(r, INDEX_CONTEXT, "local height")? as usize;
        let local_w = wire::read_u32(r, INDEX_CONTEXT, "local width")? as usize;
        let local_dim = wire::read_u32(r, INDEX_CONTEXT, "local dim")? as usize;
        let count = wire::read_u64(r, INDEX_CONTEXT, "record count")?;
        let mut index = PlaceIndex::new(global_dim, local_h, local_w, local_dim);
        for i in 0..count {
            let what = format!("record {i}");
            let id = wire::read_u64(r, INDEX_CONTEXT, &what)?;
            let lat = wire::read_f64(r, INDEX_CONTEXT, &what)?;
            let lon = wire::read_f64(r, INDEX_CONTEXT, &what)?;
            let heading = wire::read_f32(r, INDEX_CONTEXT, &what)?;
            let global = wire::read_f32_vec(r, global_dim, INDEX_CONTEXT, &what)?;
            let local = wire::read_f32_vec(r, local_h * local_w * local_dim, INDEX_CONTEXT, &what)?;
            index.add(PlaceRecord {
                id,
                lat,
                lon,
                heading: if heading.is_nan() { None } else { Some(heading as f64) },
                global,
                local: LocalFeatureGrid::from_vec(local_h, local_w, local_dim, local)?,
                patches: None,
            })?;
        }
        Ok(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub id: u64,
    pub record_index: usize,
    pub distance: f64,
}

/// Exact k-nearest search by Euclidean distance over global features.
/// Distance ties order by lowest id. Requesting more results than the
/// index holds returns everything with the `clamped` flag set.
pub fn global_search(index: &PlaceIndex, query: &[f64], k: usize) -> Result<(Vec<SearchHit>, bool)> {
    if index.is_empty() {
        return Err(Error::invalid("search over an empty index"));
    }
    if k == 0 {
        return Err(Error::invalid("search needs k >= 1"));
    }
    if query.len() != index.global_dim {
        return Err(Error::shape(format!(
            "query feature has {} dims, index stores {}",
            query.len(),
            index.global_dim
        )));
    }
    let mut hits: Vec<SearchHit> = index
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d2: f64 = query
                .iter()
                .zip(&r.global)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            SearchHit {
                id: r.id,
                record_index: i,
                distance: d2.sqrt(),
            }
        })
        .collect();
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    let clamped = k > hits.len();
    hits.truncate(k);
    Ok((hits, clamped))
}

/// How the second stage scores candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RerankMode {
    /// Mutual matches over the dense upsampled local grids.
    DenseLocal,
    /// Mutual matches over the raw backbone patch tokens.
    BackbonePatches,
    /// No second stage; global order stands.
    None,
}

impl RerankMode {
    pub fn parse(s: &str) -> Result<RerankMode> {
        match s {
            "dense" => Ok(RerankMode::DenseLocal),
            "patches" => Ok(RerankMode::BackbonePatches),
            "none" => Ok(RerankMode::None),
            other => Err(Error::invalid(format!(
                "unknown rerank mode '{other}' (expected dense, patches or none)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RerankMode::DenseLocal => "dense",
            RerankMode::BackbonePatches => "patches",
            RerankMode::None => "none",
        }
    }
}

/// Query-side features for a two-stage lookup.
#[derive(Debug, Clone, Copy)]
pub struct QueryFeatures<'a> {
    pub global: &'a [f64],
    pub local: Option<&'a LocalFeatureGrid>,
    pub patches: Option<&'a LocalFeatureGrid>,
}

#[derive(Debug, Clone)]
pub struct QueryHit {
    pub id: u64,
    pub global_distance: f64,
    pub match_count: usize,
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    /// Candidates in final order.
    pub hits: Vec<QueryHit>,
    /// True when fewer than k records existed.
    pub clamped: bool,
}

/// Global candidate retrieval followed by match-count re-ranking of the
/// top k. The final order is always a permutation of the global top-k set.
pub fn two_stage_query(
    index: &PlaceIndex,
    query: &QueryFeatures,
    k: usize,
    mode: RerankMode,
) -> Result<QueryResult> {
    let (candidates, clamped) = global_search(index, query.global, k)?;
    let distances: Vec<f64> = candidates.iter().map(|h| h.distance).collect();
    let counts: Vec<usize> = match mode {
        RerankMode::None => vec![0; candidates.len()],
        RerankMode::DenseLocal => {
            let q = query.local.ok_or_else(|| {
                Error::invalid("dense re-ranking needs the query's local grid")
            })?;
            candidates
                .iter()
                .map(|h| rerank_score(q, &index.records[h.record_index].local))
                .collect::<Result<_>>()?
        }
        RerankMode::BackbonePatches => {
            let q = query.patches.ok_or_else(|| {
                Error::invalid("patch re-ranking needs the query's patch grid")
            })?;
            candidates
                .iter()
                .map(|h| {
                    let r = &index.records[h.record_index];
                    let grid = r.patches.as_ref().ok_or_else(|| {
                        Error::invalid(format!(
                            "record {} carries no patch grid; rebuild the index from features",
                            r.id
                        ))
                    })?;
                    rerank_score(q, grid)
                })
                .collect::<Result<_>>()?
        }
    };
    let order = rerank_order(&counts, &distances)?;
    Ok(QueryResult {
        hits: order
            .into_iter()
            .map(|i| QueryHit {
                id: candidates[i].id,
                global_distance: candidates[i].distance,
                match_count: counts[i],
            })
            .collect(),
        clamped,
    })
}

/// What counts as a geographically correct retrieval.
#[derive(Debug, Clone, Copy)]
pub struct MatchThresholds {
    pub distance_m: f64,
    /// When set, results must also face within this many degrees of the
    /// query; applied only if both sides carry headings.
    pub heading_deg: Option<f64>,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            distance_m: 25.0,
            heading_deg: None,
        }
    }
}

impl MatchThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.distance_m <= 0.0 {
            return Err(Error::invalid("distance threshold must be positive"));
        }
        Ok(())
    }
}

/// A query's geotag paired with its ranked result ids.
#[derive(Debug, Clone)]
pub struct RankedQuery {
    pub lat: f64,
    pub lon: f64,
    pub heading: Option<f64>,
    pub ranked_ids: Vec<u64>,
}

/// Ground-truth judgment for one query/record pair: within the distance
/// threshold, and within the heading threshold when one is set and both
/// sides carry a heading.
pub fn judge_match(
    q_pos: (f64, f64),
    q_heading: Option<f64>,
    r_pos: (f64, f64),
    r_heading: Option<f64>,
    t: &MatchThresholds,
) -> bool {
    if haversine_m(q_pos.0, q_pos.1, r_pos.0, r_pos.1) > t.distance_m {
        return false;
    }
    if let (Some(max_deg), Some(qh), Some(rh)) = (t.heading_deg, q_heading, r_heading) {
        if heading_delta(qh, rh) > max_deg {
            return false;
        }
    }
    true
}

fn is_correct(q: &RankedQuery, r: &PlaceRecord, t: &MatchThresholds) -> bool {
    judge_match((q.lat, q.lon), q.heading, (r.lat, r.lon), r.heading, t)
}

/// Percentage of queries whose top-N results contain at least one record
/// within the thresholds, for each N.
pub fn recall_at_n(
    index: &PlaceIndex,
    queries: &[RankedQuery],
    thresholds: &MatchThresholds,
    ns: &[usize],
) -> Result<Vec<(usize, f64)>> {
    thresholds.validate()?;
    if queries.is_empty() {
        return Err(Error::invalid("recall needs at least one query"));
    }
    for (i, q) in queries.iter().enumerate() {
        if q.ranked_ids.is_empty() {
            return Err(Error::invalid(format!("query {i} has no results")));
        }
    }
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 {
            return Err(Error::invalid("recall is undefined at N = 0"));
        }
        let mut correct = 0usize;
        for q in queries {
            let hit = q.ranked_ids.iter().take(n).any(|id| {
                index
                    .record_by_id(*id)
                    .map(|r| is_correct(q, r, thresholds))
                    .unwrap_or(false)
            });
            if hit {
                correct += 1;
            }
        }
        out.push((n, 100.0 * correct as f64 / queries.len() as f64));
    }
    Ok(out)
}
