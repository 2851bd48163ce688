//! Activation profiles: the concatenated post-activation outputs of every
//! layer of a network for a single input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open range of one layer's outputs inside a flat profile vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub start: usize,
    pub len: usize,
}

impl LayerSlice {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Flat activation vector for one input, with per-layer segment boundaries.
///
/// The segments are contiguous and in layer order, so `values` is exactly the
/// concatenation `[a_1 | a_2 | ... | a_L]` including the final output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    values: Vec<f32>,
    slices: Vec<LayerSlice>,
}

impl ActivationProfile {
    /// Build a profile, checking that the slices tile `values` exactly.
    pub fn new(values: Vec<f32>, slices: Vec<LayerSlice>) -> Result<Self> {
        let mut cursor = 0usize;
        for (l, s) in slices.iter().enumerate() {
            if s.start != cursor || s.len == 0 {
                return Err(Error::Shape(format!(
                    "profile slice {l} (start {}, len {}) does not tile the vector contiguously",
                    s.start, s.len
                )));
            }
            cursor += s.len;
        }
        if cursor != values.len() {
            return Err(Error::Shape(format!(
                "profile slices cover {cursor} values but the vector holds {}",
                values.len()
            )));
        }
        Ok(ActivationProfile { values, slices })
    }

    /// Slice layout for a network with the given per-layer output sizes.
    pub fn layout(layer_sizes: &[usize]) -> Vec<LayerSlice> {
        let mut slices = Vec::with_capacity(layer_sizes.len());
        let mut start = 0;
        for &len in layer_sizes {
            slices.push(LayerSlice { start, len });
            start += len;
        }
        slices
    }

    /// Total profile length (sum of all layer widths).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn slices(&self) -> &[LayerSlice] {
        &self.slices
    }

    pub fn layer_count(&self) -> usize {
        self.slices.len()
    }

    /// The segment belonging to layer `l` (0-based).
    pub fn layer(&self, l: usize) -> &[f32] {
        let s = self.slices[l];
        &self.values[s.start..s.end()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let slices = ActivationProfile::layout(&[3, 2, 4]);
        assert_eq!(
            slices,
            vec![
                LayerSlice { start: 0, len: 3 },
                LayerSlice { start: 3, len: 2 },
                LayerSlice { start: 5, len: 4 },
            ]
        );
    }

    #[test]
    fn new_rejects_gaps_and_length_mismatch() {
        let values = vec![0.0; 5];
        let gap = vec![LayerSlice { start: 0, len: 2 }, LayerSlice { start: 3, len: 2 }];
        assert!(ActivationProfile::new(values.clone(), gap).is_err());
        let short = vec![LayerSlice { start: 0, len: 2 }];
        assert!(ActivationProfile::new(values, short).is_err());
    }

    #[test]
    fn layer_returns_the_right_segment() {
        let p = ActivationProfile::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            ActivationProfile::layout(&[2, 3]),
        )
        .unwrap();
        assert_eq!(p.layer(0), &[1.0, 2.0]);
        assert_eq!(p.layer(1), &[3.0, 4.0, 5.0]);
        assert_eq!(p.len(), 5);
        assert_eq!(p.layer_count(), 2);
    }
}
