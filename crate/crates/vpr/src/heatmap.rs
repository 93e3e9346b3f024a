//! Channel-mean activation maps: a quick visual check of where the
//! feature map responds, written as CSV and PGM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::write_pgm;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Min-max normalized to [0, 1]; a constant map normalizes to 0.5.
    pub values: Vec<f64>,
}

/// Per-location mean over channels of an h x w x c feature map, min-max
/// normalized.
pub fn channel_mean_map(fm: &Tensor) -> Result<Heatmap> {
    let shape = fm.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "heatmap needs an hxwxc feature map, got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if c == 0 {
        return Err(Error::shape("feature map has zero channels"));
    }
    let mut values: Vec<f64> = (0..h * w)
        .map(|loc| fm.data()[loc * c..(loc + 1) * c].iter().sum::<f64>() / c as f64)
        .collect();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        values.iter_mut().for_each(|v| *v = 0.5);
    } else {
        let span = max - min;
        values.iter_mut().for_each(|v| *v = (*v - min) / span);
    }
    Ok(Heatmap {
        height: h,
        width: w,
        values,
    })
}

/// One CSV row per map row.
pub fn write_heatmap_csv(path: &Path, map: &Heatmap) -> Result<()> {
    let mut out = String::new();
    for row in map.values.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_heatmap_pgm(path: &Path, map: &Heatmap) -> Result<()> {
    write_pgm(path, map.height, map.width, &map.values)
}
