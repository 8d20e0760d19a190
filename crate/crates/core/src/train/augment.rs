//! Frequency and time masking on raw feature frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecAugment {
    /// Maximum width `F` of a frequency band.
    pub freq_width: usize,
    /// Number of frequency bands `mF`.
    pub freq_masks: usize,
    /// Maximum width `T` of a time band.
    pub time_width: usize,
    /// Number of time bands `mT`.
    pub time_masks: usize,
}

impl SpecAugment {
    /// Widths used with 80-dimensional filterbanks.
    pub const FULL: Self = Self {
        freq_width: 30,
        freq_masks: 2,
        time_width: 40,
        time_masks: 2,
    };

    pub const OFF: Self = Self {
        freq_width: 0,
        freq_masks: 0,
        time_width: 0,
        time_masks: 0,
    };
}

impl Default for SpecAugment {
    /// Scaled for 16-dimensional features and 3–5 frames per phoneme.
    fn default() -> Self {
        Self {
            freq_width: 3,
            freq_masks: 2,
            time_width: 4,
            time_masks: 2,
        }
    }
}

/// Zeroes `freq_masks` column bands and `time_masks` row bands. Each width
/// is drawn from `0..=max` and clamped to the matrix; each start is uniform
/// over the positions where the band fits.
pub fn spec_augment(x: &Tensor, cfg: &SpecAugment, rng: &mut StreamRng) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = x.clone();
    let data = out.data_mut();
    for _ in 0..cfg.freq_masks {
        let w = rng.random_range(0..=cfg.freq_width).min(cols);
        let start = rng.random_range(0..=cols - w);
        for r in 0..rows {
            data[r * cols + start..r * cols + start + w].fill(0.0);
        }
    }
    for _ in 0..cfg.time_masks {
        let w = rng.random_range(0..=cfg.time_width).min(rows);
        let start = rng.random_range(0..=rows - w);
        data[start * cols..(start + w) * cols].fill(0.0);
    }
    out
}
