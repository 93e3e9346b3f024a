//! Extracted-feature files: everything `extract` produces for a set of
//! images, keyed by id and carrying geotags.
//!
//! The index file stores only what retrieval needs (global plus dense
//! local grids); this sidecar additionally keeps the raw backbone patch
//! grids so the coarse re-ranking mode can be compared without
//! re-extracting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::LocalFeatureGrid;
use crate::index::{PlaceIndex, PlaceRecord};
use crate::wire;

pub const FEATURES_MAGIC: &[u8; 4] = b"SVFT";
pub const FEATURES_VERSION: u32 = 1;
const FEATURES_CONTEXT: &str = "features";

#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub heading: Option<f64>,
    pub global: Vec<f64>,
    pub local: LocalFeatureGrid,
    pub patches: LocalFeatureGrid,
}

#[derive(Debug, Clone)]
pub struct FeatureFile {
    global_dim: usize,
    local_shape: (usize, usize, usize),
    patch_shape: (usize, usize, usize),
    records: Vec<FeatureRecord>,
}

impl FeatureFile {
    pub fn new(
        global_dim: usize,
        local_shape: (usize, usize, usize),
        patch_shape: (usize, usize, usize),
    ) -> FeatureFile {
        FeatureFile {
            global_dim,
            local_shape,
            patch_shape,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn record_by_id(&self, id: u64) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn push(&mut self, record: FeatureRecord) -> Result<()> {
        let l = &record.local;
        let p = &record.patches;
        if record.global.len() != self.global_dim
            || (l.height(), l.width(), l.channels()) != self.local_shape
            || (p.height(), p.width(), p.channels()) != self.patch_shape
        {
            return Err(Error::shape(format!(
                "record {} does not match the file's feature shapes",
                record.id
            )));
        }
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::invalid(format!("duplicate record id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    /// Builds an in-memory retrieval index over these records, keeping the
    /// patch grids attached for the coarse re-ranking mode.
    pub fn build_index(&self) -> Result<PlaceIndex> {
        let (lh, lw, lc) = self.local_shape;
        let mut index = PlaceIndex::new(self.global_dim, lh, lw, lc);
        for r in &self.records {
            index.add(PlaceRecord {
                id: r.id,
                lat: r.lat,
                lon: r.lon,
                heading: r.heading,
                global: r.global.clone(),
                local: r.local.clone(),
                patches: Some(r.patches.clone()),
            })?;
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FEATURES_MAGIC)?;
        wire::write_u32(w, FEATURES_VERSION)?;
        wire::write_u32(w, self.global_dim as u32)?;
        for dim in [
            self.local_shape.0,
            self.local_shape.1,
            self.local_shape.2,
            self.patch_shape.0,
            self.patch_shape.1,
            self.patch_shape.2,
        ] {
            wire::write_u32(w, dim as u32)?;
        }
        wire::write_u64(w, self.records.len() as u64)?;
        for r in &self.records {
            wire::write_u64(w, r.id)?;
            wire::write_f64(w, r.lat)?;
            wire::write_f64(w, r.lon)?;
            wire::write_f32(w, r.heading.map(|h| h as f32).unwrap_or(f32::NAN))?;
            wire::write_f32_slice(w, &r.global)?;
            wire::write_f32_slice(w, r.local.data())?;
            wire::write_f32_slice(w, r.patches.data())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureFile> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<FeatureFile> {
        wire::expect_header(r, FEATURES_CONTEXT, FEATURES_MAGIC, FEATURES_VERSION)?;
        let mut dims = [0usize; 7];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = wire::read_u32(r, FEATURES_CONTEXT, &format!("dimension {i}"))? as usize;
        }
        let [global_dim, lh, lw, lc, ph, pw, pc] = dims;
        let count = wire::read_u64(r, FEATURES_CONTEXT, "record count")?;
        let mut file = FeatureFile::new(global_dim, (lh, lw, lc), (ph, pw, pc));
        for i in 0..count {
            let what = format!("record {i}");
            let id = wire::read_u64(r, FEATURES_CONTEXT, &what)?;
            let lat = wire::read_f64(r, FEATURES_CONTEXT, &what)?;
            let lon = wire::read_f64(r, FEATURES_CONTEXT, &what)?;
            let heading = wire::read_f32(r, FEATURES_CONTEXT, &what)?;
            let global = wire::read_f32_vec(r, global_dim, FEATURES_CONTEXT, &what)?;
            let local = wire::read_f32_vec(r, lh * lw * lc, FEATURES_CONTEXT, &what)?;
            let patches = wire::read_f32_vec(r, ph * pw * pc, FEATURES_CONTEXT, &what)?;
            file.push(FeatureRecord {
                id,
                lat,
                lon,
                heading: if heading.is_nan() { None } else { Some(heading as f64) },
                global,
                local: LocalFeatureGrid::from_vec(lh, lw, lc, local)?,
                patches: LocalFeatureGrid::from_vec(ph, pw, pc, patches)?,
            })?;
        }
        Ok(file)
    }
}
