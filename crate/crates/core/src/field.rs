use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-channel 2D field stored channel-planar, row-major: element
/// `(c, row, col)` lives at `(c * height + row) * width + col`.
///
/// For boundary-parallel slices rows run along `z` (normal to the incline)
/// and columns along `x` (downslope).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field2 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Field2 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Field2 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "field of {channels}x{height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Field2 {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.idx(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        let i = self.idx(c, row, col);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// New field holding the listed channels, in order.
    pub fn select(&self, channels: &[usize]) -> Field2 {
        let mut out = Field2::zeros(channels.len(), self.height, self.width);
        for (k, &c) in channels.iter().enumerate() {
            out.channel_mut(k).copy_from_slice(self.channel(c));
        }
        out
    }

    pub fn same_shape(&self, other: &Field2) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-cell vector magnitude across all channels.
    pub fn magnitude(&self) -> Vec<f64> {
        let n = self.plane_len();
        (0..n)
            .map(|i| {
                (0..self.channels)
                    .map(|c| self.data[c * n + i].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}
