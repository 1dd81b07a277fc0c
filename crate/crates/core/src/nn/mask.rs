use serde::{Deserialize, Serialize};

/// Binary keep-vector for one dropout site (one bit per channel or
/// embedding dimension).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub site: String,
    pub keep: Vec<bool>,
}

impl DropoutMask {
    pub fn ones(site: impl Into<String>, units: usize) -> Self {
        Self {
            site: site.into(),
            keep: vec![true; units],
        }
    }

    pub fn zeros(site: impl Into<String>, units: usize) -> Self {
        Self {
            site: site.into(),
            keep: vec![false; units],
        }
    }

    /// Unpacks the low `units` bits of `code` (bit `i` -> unit `i`).
    pub fn from_bits(site: impl Into<String>, units: usize, code: u64) -> Self {
        Self {
            site: site.into(),
            keep: (0..units).map(|i| code >> i & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}
