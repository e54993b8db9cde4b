//! Intensity bins and the partition of pixel positions into bin sets.
//!
//! The prediction range `[0, 255]` is cut into `T = ceil(256 / b)` bins
//! `[0, b), [b, 2b), ..., [(T-1)b, 255]`. A pixel position belongs to the bin
//! set whose `m`-th index is the bin of model `m`'s prediction there. Bin sets
//! are mutually exclusive and cover every position, so each one can be solved
//! on its own.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{clamp_value, ReferenceBatch, MAX_VALUE};

pub const DEFAULT_BIN_WIDTH: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinSpace {
    bin_width: u32,
    num_bins: u32,
}

impl BinSpace {
    pub fn new(bin_width: u32) -> Result<Self> {
        if bin_width == 0 {
            return Err(Error::InvalidConfig("bin width must be at least 1".into()));
        }
        Ok(BinSpace {
            bin_width,
            num_bins: 256u32.div_ceil(bin_width),
        })
    }

    pub fn bin_width(&self) -> u32 {
        self.bin_width
    }

    pub fn num_bins(&self) -> u32 {
        self.num_bins
    }

    /// Bin of a value in `[0, 255]`; the last bin is closed on the right.
    pub fn bin_index(&self, value: f64) -> Result<u32> {
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        if !(0.0..=MAX_VALUE).contains(&value) {
            return Err(Error::OutOfRange(value));
        }
        Ok(self.index_unchecked(value))
    }

    /// Bin of an arbitrary prediction, clamped into `[0, 255]` first.
    #[inline]
    pub fn bin_index_clamped(&self, value: f64) -> u32 {
        self.index_unchecked(clamp_value(value))
    }

    #[inline]
    fn index_unchecked(&self, value: f64) -> u32 {
        let idx = (value / f64::from(self.bin_width)).floor() as u32;
        idx.min(self.num_bins - 1)
    }

    /// Whether `value` falls inside bin `idx`.
    pub fn contains(&self, idx: u32, value: f64) -> bool {
        idx < self.num_bins && self.bin_index_clamped(value) == idx
    }
}

/// The M-tuple of bin indices identifying one bin set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinSetKey(Vec<u32>);

impl BinSetKey {
    pub fn new(indices: Vec<u32>) -> Self {
        BinSetKey(indices)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }
}

impl Borrow<[u32]> for BinSetKey {
    fn borrow(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for BinSetKey {
    fn from(v: Vec<u32>) -> Self {
        BinSetKey(v)
    }
}

impl fmt::Display for BinSetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, idx) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{idx}")?;
        }
        write!(f, ")")
    }
}

/// Ground-truth and prediction values of the pixels in one bin set.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGroup {
    pub key: BinSetKey,
    /// Ascending positions into the concatenated reference vectors.
    pub pixel_indices: Vec<usize>,
    pub gt_values: Vec<f64>,
    /// `pred_values[m][i]` is model `m`'s prediction at `pixel_indices[i]`.
    pub pred_values: Vec<Vec<f64>>,
}

impl BinGroup {
    /// A group built directly from values, with positions `0..n`.
    pub fn from_values(
        key: BinSetKey,
        gt_values: Vec<f64>,
        pred_values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if pred_values.is_empty() {
            return Err(Error::Empty("bin group has no models".into()));
        }
        if key.arity() != pred_values.len() {
            return Err(Error::KeyArity {
                expected: pred_values.len(),
                actual: key.arity(),
            });
        }
        if pred_values.iter().any(|p| p.len() != gt_values.len()) {
            return Err(Error::ShapeMismatch(
                "every model needs one prediction per ground-truth value".into(),
            ));
        }
        Ok(BinGroup {
            key,
            pixel_indices: (0..gt_values.len()).collect(),
            gt_values,
            pred_values,
        })
    }

    pub fn count(&self) -> usize {
        self.gt_values.len()
    }

    pub fn num_models(&self) -> usize {
        self.pred_values.len()
    }
}

fn collect_positions(preds: &[&[f64]], space: &BinSpace) -> BTreeMap<BinSetKey, Vec<usize>> {
    let len = preds.first().map_or(0, |p| p.len());
    let mut groups: BTreeMap<BinSetKey, Vec<usize>> = BTreeMap::new();
    let mut key = vec![0u32; preds.len()];
    for i in 0..len {
        for (slot, p) in key.iter_mut().zip(preds) {
            *slot = space.bin_index_clamped(p[i]);
        }
        match groups.get_mut(key.as_slice()) {
            Some(list) => list.push(i),
            None => {
                groups.insert(BinSetKey(key.clone()), vec![i]);
            }
        }
    }
    groups
}

/// Splits a reference batch into its non-empty bin groups.
pub fn partition_reference(
    batch: &ReferenceBatch,
    space: &BinSpace,
) -> BTreeMap<BinSetKey, BinGroup> {
    let preds: Vec<&[f64]> = batch.preds().iter().map(Vec::as_slice).collect();
    let gt = batch.gt();
    collect_positions(&preds, space)
        .into_iter()
        .map(|(key, pixel_indices)| {
            let gt_values = pixel_indices.iter().map(|&i| gt[i]).collect();
            let pred_values = preds
                .iter()
                .map(|p| pixel_indices.iter().map(|&i| p[i]).collect())
                .collect();
            let group = BinGroup {
                key: key.clone(),
                pixel_indices,
                gt_values,
                pred_values,
            };
            (key, group)
        })
        .collect()
}

/// Splits test-time predictions into bin sets, without ground truth.
pub fn partition_prediction(
    preds: &[&[f64]],
    space: &BinSpace,
) -> Result<BTreeMap<BinSetKey, Vec<usize>>> {
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to partition".into()));
    }
    let len = preds[0].len();
    if let Some(bad) = preds.iter().find(|p| p.len() != len) {
        return Err(Error::ShapeMismatch(format!(
            "prediction lengths differ: {len} vs {}",
            bad.len()
        )));
    }
    Ok(collect_positions(preds, space))
}
