//! JSON-Lines dataset manifests: one image per line with its id, path,
//! geotag and split assignment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Query,
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "database" => Ok(Split::Database),
            "query" => Ok(Split::Query),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::invalid(format!(
                "unknown split '{other}' (expected database, query, train or val)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Database => "database",
            Split::Query => "query",
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub image_path: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading_deg: Option<f64>,
    pub split: Split,
}

/// Parses a JSON-Lines manifest. Blank lines are ignored; unknown fields
/// pass through silently. Errors carry the offending 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| Error::ManifestLine {
                path: path_str.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if !(-90.0..=90.0).contains(&entry.lat) || !(-180.0..=180.0).contains(&entry.lon) {
            return Err(Error::ManifestLine {
                path: path_str.clone(),
                line: i + 1,
                reason: format!("coordinates out of range: ({}, {})", entry.lat, entry.lon),
            });
        }
        if entries.iter().any(|e| e.id == entry.id) {
            return Err(Error::DuplicateId {
                path: path_str,
                id: entry.id,
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::invalid(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_file(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, contents).unwrap();
        std::mem::forget(dir);
        path
    }

    fn entry(id: u64) -> ManifestEntry {
        ManifestEntry {
            id,
            image_path: format!("images/{id}.ppm"),
            lat: 45.5,
            lon: -122.6,
            heading_deg: if id % 2 == 0 { Some(90.0) } else { None },
            split: Split::Database,
        }
    }

    #[test]
    fn empty_file_is_an_empty_manifest() {
        let path = temp_file("empty.jsonl", "");
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_entries() {
        let entries: Vec<ManifestEntry> = (0..4).map(entry).collect();
        let path = temp_file("m.jsonl", "");
        save_manifest(&path, &entries).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn missing_field_errors_name_the_field_and_line() {
        let good = serde_json::to_string(&entry(1)).unwrap();
        let bad = r#"{"id": 2, "image_path": "x.ppm", "lon": 0.0, "split": "query"}"#;
        let path = temp_file("bad.jsonl", &format!("{good}\n{bad}\n"));
        match load_manifest(&path) {
            Err(Error::ManifestLine { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("lat"), "reason: {reason}");
            }
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let a = serde_json::to_string(&entry(7)).unwrap();
        let path = temp_file("dup.jsonl", &format!("{a}\n{a}\n"));
        match load_manifest(&path) {
            Err(Error::DuplicateId { id: 7, .. }) => {}
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_ignored_and_blank_lines_skipped() {
        let mut line = serde_json::to_string(&entry(3)).unwrap();
        line.insert_str(line.len() - 1, r#","camera":"front""#);
        let path = temp_file("extra.jsonl", &format!("\n{line}\n\n"));
        let entries = load_manifest(&path).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].id, 3);
    }

    #[test]
    fn out_of_range_coordinates_are_line_errors() {
        let mut e = entry(1);
        e.lat = 100.0;
        let line = serde_json::to_string(&e).unwrap();
        let path = temp_file("range.jsonl", &format!("{line}\n"));
        assert!(matches!(
            load_manifest(&path),
            Err(Error::ManifestLine { line: 1, .. })
        ));
    }

    #[test]
    fn split_names_round_trip() {
        for split in [Split::Database, Split::Query, Split::Train, Split::Val] {
            assert_eq!(Split::parse(split.as_str()).unwrap(), split);
        }
        assert!(Split::parse("test").is_err());
    }
}
