//! Weight lookup table: estimation over a reference set, lookup, and JSON persistence.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{partition_reference, BinGroup, BinSetKey, BinSpace};
use crate::error::{Error, Result};
use crate::mpem::{run_mpem, EmConfig};
use crate::tensor::ReferenceBatch;

pub const LUT_VERSION: u64 = 1;

/// Tolerance on the sum of a weight vector.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    Em,
    FallbackSmall,
    FallbackUndetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutEntry {
    pub key: BinSetKey,
    pub weights: Vec<f64>,
    pub count: usize,
    pub converged: bool,
    pub steps: usize,
    pub source: EntrySource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightLut {
    pub num_models: usize,
    pub space: BinSpace,
    pub min_pixels: usize,
    pub fallback_weights: Vec<f64>,
    pub entries: BTreeMap<BinSetKey, LutEntry>,
}

pub fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::SimplexViolation(format!(
            "weights {weights:?} must be finite and non-negative"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::SimplexViolation(format!(
            "weights {weights:?} sum to {sum}"
        )));
    }
    Ok(())
}

pub fn uniform_weights(num_models: usize) -> Vec<f64> {
    vec![1.0 / num_models as f64; num_models]
}

impl WeightLut {
    /// A table with no entries, answering every lookup with `fallback_weights`.
    pub fn empty(space: BinSpace, fallback_weights: Vec<f64>, min_pixels: usize) -> Result<Self> {
        if fallback_weights.is_empty() {
            return Err(Error::Empty("a LUT needs at least one model".into()));
        }
        check_simplex(&fallback_weights)?;
        Ok(WeightLut {
            num_models: fallback_weights.len(),
            space,
            min_pixels,
            fallback_weights,
            entries: BTreeMap::new(),
        })
    }

    pub fn uniform(space: BinSpace, num_models: usize) -> Result<Self> {
        if num_models == 0 {
            return Err(Error::Empty("a LUT needs at least one model".into()));
        }
        WeightLut::empty(
            space,
            uniform_weights(num_models),
            EmConfig::default().min_pixels,
        )
    }

    pub fn insert(&mut self, entry: LutEntry) -> Result<()> {
        self.check_key(entry.key.indices())?;
        if entry.weights.len() != self.num_models {
            return Err(Error::ModelCountMismatch {
                expected: self.num_models,
                actual: entry.weights.len(),
            });
        }
        check_simplex(&entry.weights)?;
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    fn check_key(&self, key: &[u32]) -> Result<()> {
        if key.len() != self.num_models {
            return Err(Error::KeyArity {
                expected: self.num_models,
                actual: key.len(),
            });
        }
        if let Some(&bad) = key.iter().find(|&&i| i >= self.space.num_bins()) {
            return Err(Error::MalformedLut(format!(
                "bin index {bad} is not below {} bins",
                self.space.num_bins()
            )));
        }
        Ok(())
    }

    /// Stored weights for `key`, or the fallback weights when the key was never seen.
    pub fn lookup(&self, key: &[u32]) -> Result<&[f64]> {
        self.check_key(key)?;
        Ok(self.weights_for(key))
    }

    /// Lookup without validation, for keys produced by this table's own [`BinSpace`].
    #[inline]
    pub(crate) fn weights_for(&self, key: &[u32]) -> &[f64] {
        self.entries
            .get(key)
            .map_or(self.fallback_weights.as_slice(), |e| e.weights.as_slice())
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.count).sum()
    }

    pub fn source_counts(&self) -> SourceCounts {
        let mut counts = SourceCounts::default();
        for e in self.entries.values() {
            match e.source {
                EntrySource::Em => counts.em += 1,
                EntrySource::FallbackSmall => counts.fallback_small += 1,
                EntrySource::FallbackUndetermined => counts.fallback_undetermined += 1,
            }
        }
        counts
    }

    pub fn to_json(&self) -> String {
        let doc = LutDocument {
            version: LUT_VERSION,
            num_models: self.num_models,
            bin_width: self.space.bin_width(),
            num_bins: self.space.num_bins(),
            value_range: [0, 255],
            min_pixels: self.min_pixels,
            fallback_weights: self.fallback_weights.clone(),
            entries: self.entries.values().cloned().collect(),
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("LUT serialization cannot fail");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedLut(e.to_string()))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(LUT_VERSION) => {}
            Some(other) => return Err(Error::LutVersion(other)),
            None => return Err(Error::MalformedLut("missing or invalid version".into())),
        }
        let doc: LutDocument =
            serde_json::from_value(raw).map_err(|e| Error::MalformedLut(e.to_string()))?;
        let space = BinSpace::new(doc.bin_width)?;
        if doc.num_bins != space.num_bins() {
            return Err(Error::MalformedLut(format!(
                "num_bins {} does not match bin_width {} (expected {})",
                doc.num_bins,
                doc.bin_width,
                space.num_bins()
            )));
        }
        if doc.value_range != [0, 255] {
            return Err(Error::MalformedLut(format!(
                "value_range {:?} must be [0, 255]",
                doc.value_range
            )));
        }
        if doc.fallback_weights.len() != doc.num_models {
            return Err(Error::MalformedLut(format!(
                "{} fallback weights for {} models",
                doc.fallback_weights.len(),
                doc.num_models
            )));
        }
        let mut lut = WeightLut::empty(space, doc.fallback_weights, doc.min_pixels)?;
        for entry in doc.entries {
            let key = entry.key.clone();
            if lut.entries.contains_key(&key) {
                return Err(Error::MalformedLut(format!("duplicate key {key}")));
            }
            lut.insert(entry)?;
        }
        Ok(lut)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceCounts {
    pub em: usize,
    pub fallback_small: usize,
    pub fallback_undetermined: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LutDocument {
    version: u64,
    num_models: usize,
    bin_width: u32,
    num_bins: u32,
    value_range: [u32; 2],
    min_pixels: usize,
    fallback_weights: Vec<f64>,
    entries: Vec<LutEntry>,
}

pub fn serialize_lut(lut: &WeightLut, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, lut.to_json()).map_err(|e| Error::io(path, e))
}

pub fn deserialize_lut(path: impl AsRef<Path>) -> Result<WeightLut> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    WeightLut::from_json(&text)
}

/// Solves one group, substituting `fallback` for small or undetermined fits.
pub fn estimate_entry(group: &BinGroup, cfg: &EmConfig, fallback: &[f64]) -> Result<LutEntry> {
    let count = group.count();
    if count < cfg.min_pixels {
        return Ok(LutEntry {
            key: group.key.clone(),
            weights: fallback.to_vec(),
            count,
            converged: false,
            steps: 0,
            source: EntrySource::FallbackSmall,
        });
    }
    let fit = run_mpem(group, cfg)?;
    let (weights, source) = if fit.is_undetermined(cfg) {
        (fallback.to_vec(), EntrySource::FallbackUndetermined)
    } else {
        (fit.weights, EntrySource::Em)
    };
    Ok(LutEntry {
        key: group.key.clone(),
        weights,
        count,
        converged: fit.converged,
        steps: fit.steps_taken,
        source,
    })
}

/// Builds the table with uniform fallback weights.
pub fn estimate_lut(batch: &ReferenceBatch, space: &BinSpace, cfg: &EmConfig) -> Result<WeightLut> {
    if batch.num_models() == 0 {
        return Err(Error::Empty("reference set has no models".into()));
    }
    estimate_lut_with_fallback(batch, space, cfg, uniform_weights(batch.num_models()))
}

pub fn estimate_lut_with_fallback(
    batch: &ReferenceBatch,
    space: &BinSpace,
    cfg: &EmConfig,
    fallback_weights: Vec<f64>,
) -> Result<WeightLut> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("reference set has no pixels".into()));
    }
    if fallback_weights.len() != batch.num_models() {
        return Err(Error::ModelCountMismatch {
            expected: batch.num_models(),
            actual: fallback_weights.len(),
        });
    }
    let mut lut = WeightLut::empty(*space, fallback_weights, cfg.min_pixels)?;
    let groups: Vec<BinGroup> = partition_reference(batch, space).into_values().collect();
    // Order-preserving collect: the result is independent of the pool size.
    let entries = groups
        .par_iter()
        .map(|g| estimate_entry(g, cfg, &lut.fallback_weights))
        .collect::<Result<Vec<_>>>()?;
    for entry in entries {
        lut.entries.insert(entry.key.clone(), entry);
    }
    Ok(lut)
}
