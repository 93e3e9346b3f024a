//! Dense per-location feature grids: the unit of data exchanged between the
//! local feature head, the matcher and the index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H x W grid of feature vectors, row-major with channels contiguous per
/// location. Grid locations are flattened row-major when treated as a list
/// of local features.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureGrid {
    h: usize,
    w: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LocalFeatureGrid {
    pub fn zeros(h: usize, w: usize, channels: usize) -> LocalFeatureGrid {
        LocalFeatureGrid {
            h,
            w,
            channels,
            data: vec![0.0; h * w * channels],
        }
    }

    pub fn from_vec(h: usize, w: usize, channels: usize, data: Vec<f64>) -> Result<LocalFeatureGrid> {
        if data.len() != h * w * channels {
            return Err(Error::shape(format!(
                "grid {}x{}x{} wants {} values, got {}",
                h,
                w,
                channels,
                h * w * channels,
                data.len()
            )));
        }
        Ok(LocalFeatureGrid { h, w, channels, data })
    }

    /// Reinterprets an (h, w, c) tensor as a feature grid.
    pub fn from_tensor(t: &Tensor) -> Result<LocalFeatureGrid> {
        if t.rank() != 3 {
            return Err(Error::shape(format!(
                "expected rank-3 feature map, got shape {:?}",
                t.shape()
            )));
        }
        LocalFeatureGrid::from_vec(t.dim(0), t.dim(1), t.dim(2), t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of grid locations (the local feature count).
    pub fn locations(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Feature vector at flattened row-major location index.
    pub fn feature(&self, loc: usize) -> &[f64] {
        &self.data[loc * self.channels..(loc + 1) * self.channels]
    }

    pub fn feature_at(&self, y: usize, x: usize) -> &[f64] {
        self.feature(y * self.w + x)
    }
}
