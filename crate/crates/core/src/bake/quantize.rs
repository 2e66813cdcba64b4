//! Affine 8-bit quantization of raw feature preactivations.

use serde::{Deserialize, Serialize};

use crate::field::{FeatureField, CHANNELS};

/// Closed range mapped onto `0..=255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantRange {
    pub min: f64,
    pub max: f64,
}

impl Default for QuantRange {
    fn default() -> Self {
        QuantRange { min: -7.0, max: 7.0 }
    }
}

impl QuantRange {
    pub fn step(&self) -> f64 {
        (self.max - self.min) / 255.0
    }

    /// Clamps, maps affinely onto `[0, 255]` and rounds half away from zero.
    #[inline]
    pub fn quantize(&self, x: f64) -> u8 {
        let u = (x.clamp(self.min, self.max) - self.min) / (self.max - self.min) * 255.0;
        u.round().clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize(&self, q: u8) -> f64 {
        q as f64 / 255.0 * (self.max - self.min) + self.min
    }
}

/// Narrowest per-channel ranges inside `bound` that cover every stored value
/// of the field, so each channel spends its 256 codes on values it has.
pub fn fit_ranges(field: &FeatureField, bound: QuantRange) -> [QuantRange; CHANNELS] {
    let mut lo = [f64::INFINITY; CHANNELS];
    let mut hi = [f64::NEG_INFINITY; CHANNELS];
    let values = field.planes.planes.iter().flatten().chain(&field.grid.data);
    for (i, &x) in values.enumerate() {
        let c = i % CHANNELS;
        lo[c] = lo[c].min(x);
        hi[c] = hi[c].max(x);
    }
    std::array::from_fn(|c| {
        let min = lo[c].clamp(bound.min, bound.max);
        let max = hi[c].clamp(bound.min, bound.max);
        if max - min >= MIN_SPAN {
            QuantRange { min, max }
        } else if min + MIN_SPAN <= bound.max {
            QuantRange { min, max: min + MIN_SPAN }
        } else {
            QuantRange { min: bound.max - MIN_SPAN, max: bound.max }
        }
    })
}

/// Keeps a constant channel's step away from zero.
const MIN_SPAN: f64 = 1e-6;

pub fn quantize(values: &[f64], range: &QuantRange) -> Vec<u8> {
    values.iter().map(|&x| range.quantize(x)).collect()
}

pub fn dequantize(values: &[u8], range: &QuantRange) -> Vec<f64> {
    values.iter().map(|&q| range.dequantize(q)).collect()
}
