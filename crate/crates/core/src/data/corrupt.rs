//! Corruption-shifted copies of a dataset for out-of-distribution evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

use super::LabeledDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Mask,
    PixelShuffle,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Mask,
        CorruptionKind::PixelShuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Mask => "mask",
            CorruptionKind::PixelShuffle => "pixel_shuffle",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption `{s}` (gaussian_noise, mask, pixel_shuffle)")))
    }
}

pub const SEVERITY_LEVELS: u8 = 5;

const NOISE_STD: [f64; 5] = [0.25, 0.5, 1.0, 1.5, 2.0];
const AFFECTED_FRACTION: [f64; 5] = [0.1, 0.2, 0.3, 0.45, 0.6];

/// Perturbs inputs with a strength set by `severity` (1 to 5); labels are kept.
///
/// * `gaussian_noise`: additive noise with std 0.25, 0.5, 1, 1.5, 2.
/// * `mask`: zeroes 10, 20, 30, 45, 60 % of each row's coordinates.
/// * `pixel_shuffle`: permutes that same share of each row's coordinates.
pub fn corrupt(data: &LabeledDataset, kind: CorruptionKind, severity: u8, seed: u64) -> Result<LabeledDataset> {
    if !(1..=SEVERITY_LEVELS).contains(&severity) {
        return Err(Error::invalid(format!("severity must be in 1..=5, got {severity}")));
    }
    let level = usize::from(severity - 1);
    let mut rng = stream_rng(seed, Stream::Corruption, &[kind as u64, u64::from(severity)]);
    let mut inputs = data.inputs().clone();
    let d = inputs.cols();
    let affected = ((AFFECTED_FRACTION[level] * d as f64).round() as usize).clamp(1, d);
    for i in 0..inputs.rows() {
        let row = inputs.row_mut(i);
        match kind {
            CorruptionKind::GaussianNoise => {
                let normal = Normal::new(0.0, NOISE_STD[level]).expect("valid std");
                for v in row.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            CorruptionKind::Mask => {
                for j in rand::seq::index::sample(&mut rng, d, affected) {
                    row[j] = 0.0;
                }
            }
            CorruptionKind::PixelShuffle => {
                let mut chosen = rand::seq::index::sample(&mut rng, d, affected.max(2).min(d)).into_vec();
                chosen.sort_unstable();
                let mut values: Vec<f64> = chosen.iter().map(|&j| row[j]).collect();
                values.shuffle(&mut rng);
                for (&j, v) in chosen.iter().zip(values) {
                    row[j] = v;
                }
            }
        }
    }
    data.with_inputs(inputs)
}
