//! Synthetic reference/test sets with known range-wise behaviour, and a
//! brute-force likelihood maximiser used to check the EM solver.
//!
//! Randomness comes from `Xoshiro256++` seeded through SplitMix64
//! (`seed_from_u64`). Streams are split with the generator's own jump
//! functions: the reference split uses the base state, the test split the
//! base state advanced by one `long_jump` (2^192 draws), and image `n` of a
//! split is that state advanced by `n + 1` `jump`s (2^128 draws each). Every
//! image is therefore reproducible on its own, whatever order or thread
//! generates it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{BinGroup, BinSetKey};
use crate::error::{Error, Result};
use crate::lut::check_simplex;
use crate::tensor::{clamp_value, save_image, ImageTensor, CHANNELS, MAX_VALUE};

/// How one intensity range of the ground truth is corrupted by each model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeProfile {
    /// Ground-truth interval `[lo, hi)`; the last profile also owns `hi`.
    pub lo: f64,
    pub hi: f64,
    /// Additive error bias per model.
    pub biases: Vec<f64>,
    /// Error standard deviation per model.
    pub stds: Vec<f64>,
    /// The ensemble weights this range is built to favour.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtDistribution {
    /// Independent uniform values over `[0, 255]`.
    #[default]
    Uniform,
    /// Smooth sinusoidal gradients with random frequency and phase per channel.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_ref: usize,
    pub num_test: usize,
    pub num_models: usize,
    #[serde(default)]
    pub gt_distribution: GtDistribution,
    pub range_profiles: Vec<RangeProfile>,
}

impl SynthSpec {
    /// Two models: the first is exact on `[0, 128)` while the second is biased
    /// by `+bias` with noise `std`; on `[128, 255]` the roles swap.
    pub fn range_biased(seed: u64, bias: f64, std: f64) -> Self {
        SynthSpec {
            seed,
            height: 128,
            width: 128,
            num_ref: 20,
            num_test: 20,
            num_models: 2,
            gt_distribution: GtDistribution::Uniform,
            range_profiles: vec![
                RangeProfile {
                    lo: 0.0,
                    hi: 128.0,
                    biases: vec![0.0, bias],
                    stds: vec![0.0, std],
                    weights: vec![1.0, 0.0],
                },
                RangeProfile {
                    lo: 128.0,
                    hi: MAX_VALUE,
                    biases: vec![-bias, 0.0],
                    stds: vec![std, 0.0],
                    weights: vec![0.0, 1.0],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be non-zero".into());
        }
        if self.num_models == 0 {
            return bad("need at least one model".into());
        }
        let Some(first) = self.range_profiles.first() else {
            return bad("need at least one range profile".into());
        };
        if first.lo != 0.0 {
            return bad(format!("first range starts at {}, not 0", first.lo));
        }
        for pair in self.range_profiles.windows(2) {
            if pair[0].hi != pair[1].lo {
                return bad(format!(
                    "ranges [{}, {}) and [{}, {}) do not tile",
                    pair[0].lo, pair[0].hi, pair[1].lo, pair[1].hi
                ));
            }
        }
        let last = self.range_profiles.last().expect("non-empty");
        if last.hi != MAX_VALUE {
            return bad(format!("last range ends at {}, not 255", last.hi));
        }
        for p in &self.range_profiles {
            if p.lo.partial_cmp(&p.hi) != Some(std::cmp::Ordering::Less) {
                return bad(format!("empty range [{}, {})", p.lo, p.hi));
            }
            for (name, v) in [
                ("biases", &p.biases),
                ("stds", &p.stds),
                ("weights", &p.weights),
            ] {
                if v.len() != self.num_models {
                    return bad(format!(
                        "range [{}, {}) has {} {name} for {} models",
                        p.lo,
                        p.hi,
                        v.len(),
                        self.num_models
                    ));
                }
            }
            if p.stds.iter().any(|s| !(s.is_finite() && *s >= 0.0))
                || p.biases.iter().any(|b| !b.is_finite())
            {
                return bad(format!(
                    "range [{}, {}) has invalid error parameters",
                    p.lo, p.hi
                ));
            }
            check_simplex(&p.weights)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("spec serializes");
        text.push('\n');
        text
    }

    fn profile_for(&self, v: f64) -> &RangeProfile {
        self.range_profiles
            .iter()
            .find(|p| v < p.hi)
            .unwrap_or_else(|| self.range_profiles.last().expect("validated"))
    }
}

/// Parses and validates a JSON generator spec.
pub fn parse_spec(text: &str) -> Result<SynthSpec> {
    let spec: SynthSpec =
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("synth spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

/// Ground truths and `preds[m][n]` predictions for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub gt: Vec<ImageTensor>,
    pub preds: Vec<Vec<ImageTensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSet {
    pub reference: SynthSplit,
    pub test: SynthSplit,
}

fn image_rng(seed: u64, split: usize, index: usize) -> Xoshiro256PlusPlus {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for _ in 0..split {
        rng.long_jump();
    }
    for _ in 0..=index {
        rng.jump();
    }
    rng
}

fn gen_sample(spec: &SynthSpec, rng: &mut Xoshiro256PlusPlus) -> (ImageTensor, Vec<ImageTensor>) {
    let (h, w) = (spec.height, spec.width);
    let gt: Vec<f64> = match spec.gt_distribution {
        GtDistribution::Uniform => (0..h * w * CHANNELS)
            .map(|_| rng.random::<f64>() * MAX_VALUE)
            .collect(),
        GtDistribution::Gradient => {
            let params: Vec<[f64; 3]> = (0..CHANNELS)
                .map(|_| {
                    [
                        rng.random::<f64>() * 0.2,
                        rng.random::<f64>() * 0.2,
                        rng.random::<f64>() * std::f64::consts::TAU,
                    ]
                })
                .collect();
            let mut data = Vec::with_capacity(h * w * CHANNELS);
            for y in 0..h {
                for x in 0..w {
                    for p in &params {
                        let s = (p[0] * y as f64 + p[1] * x as f64 + p[2]).sin();
                        data.push(clamp_value(127.5 + 127.5 * s));
                    }
                }
            }
            data
        }
    };
    let preds = (0..spec.num_models)
        .map(|m| {
            let data = gt
                .iter()
                .map(|&v| {
                    let prof = spec.profile_for(v);
                    let z: f64 = rng.sample(StandardNormal);
                    clamp_value(v + prof.biases[m] + prof.stds[m] * z)
                })
                .collect();
            ImageTensor::new(h, w, data).expect("generated values are in range")
        })
        .collect();
    (
        ImageTensor::new(h, w, gt).expect("generated values are in range"),
        preds,
    )
}

fn gen_split(spec: &SynthSpec, split: usize, count: usize) -> SynthSplit {
    let samples: Vec<_> = (0..count)
        .into_par_iter()
        .map(|n| gen_sample(spec, &mut image_rng(spec.seed, split, n)))
        .collect();
    let mut gt = Vec::with_capacity(count);
    let mut preds = vec![Vec::with_capacity(count); spec.num_models];
    for (g, ps) in samples {
        gt.push(g);
        for (slot, p) in preds.iter_mut().zip(ps) {
            slot.push(p);
        }
    }
    SynthSplit { gt, preds }
}

pub fn gen_set(spec: &SynthSpec) -> Result<SynthSet> {
    spec.validate()?;
    Ok(SynthSet {
        reference: gen_split(spec, 0, spec.num_ref),
        test: gen_split(spec, 1, spec.num_test),
    })
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:04}.png")
}

pub fn model_dir_name(model: usize) -> String {
    format!("model_{model}")
}

/// Writes `spec.json`, then `{ref,test}/gt/` and `{ref,test}/model_<m>/` PNG directories.
pub fn write_set(spec: &SynthSpec, set: &SynthSet, dir: &Path) -> Result<()> {
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(dir)?;
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, spec.to_json()).map_err(|e| Error::io(&spec_path, e))?;
    for (name, split) in [("ref", &set.reference), ("test", &set.test)] {
        let gt_dir = dir.join(name).join("gt");
        mk(&gt_dir)?;
        for (n, img) in split.gt.iter().enumerate() {
            save_image(img, gt_dir.join(image_name(n)))?;
        }
        for (m, model) in split.preds.iter().enumerate() {
            let mdir = dir.join(name).join(model_dir_name(m));
            mk(&mdir)?;
            for (n, img) in model.iter().enumerate() {
                save_image(img, mdir.join(image_name(n)))?;
            }
        }
    }
    Ok(())
}

/// A bin group of `count` pixels from one intensity window, where model `m`
/// predicts the truth plus a random bias and Gaussian noise. All values stay
/// inside `[0, 255]`, so the group is valid for the single-bin space.
pub fn random_group(seed: u64, num_models: usize, count: usize) -> BinGroup {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let lo = 16.0 + rng.random::<f64>() * 191.0;
    let width = 8.0 + rng.random::<f64>() * 24.0;
    let models: Vec<(f64, f64)> = (0..num_models)
        .map(|_| (rng.random_range(-8.0..8.0), rng.random_range(0.5..4.0)))
        .collect();
    let gt: Vec<f64> = (0..count)
        .map(|_| lo + rng.random::<f64>() * width)
        .collect();
    let preds = models
        .iter()
        .map(|&(bias, std)| {
            gt.iter()
                .map(|&y| {
                    let z: f64 = rng.sample(StandardNormal);
                    clamp_value(y + bias + std * z)
                })
                .collect()
        })
        .collect();
    BinGroup::from_values(BinSetKey::new(vec![0; num_models]), gt, preds)
        .expect("consistent lengths")
}

/// A group whose ground truth is drawn from `sum_m weights[m] N(means[m], variance)`.
///
/// Model `m`'s predictions alternate `means[m] -/+ sqrt(variance)`, so the
/// prediction mean and variance priors equal `means[m]` and `variance` exactly
/// when `count` is even.
pub fn mixture_group(
    seed: u64,
    count: usize,
    weights: &[f64],
    means: &[f64],
    variance: f64,
) -> Result<BinGroup> {
    check_simplex(weights)?;
    if weights.len() != means.len() || weights.is_empty() {
        return Err(Error::ShapeMismatch(
            "one mean per weight is required".into(),
        ));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let sd = variance.sqrt();
    let gt: Vec<f64> = (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = weights.len() - 1;
            for (m, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = m;
                    break;
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            means[comp] + sd * z
        })
        .collect();
    let preds = means
        .iter()
        .map(|&mu| {
            (0..count)
                .map(|i| if i % 2 == 0 { mu - sd } else { mu + sd })
                .collect()
        })
        .collect();
    BinGroup::from_values(BinSetKey::new(vec![0; means.len()]), gt, preds)
}

/// Largest grid size the oracle accepts.
pub const ORACLE_MAX_MODELS: usize = 3;

/// Exhaustive maximiser of the mixture log-likelihood over a simplex grid.
///
/// Means are the averages of each model's predictions in the group and the
/// variances are held at `variances`. Returns the best weight vector (ties go
/// to the lexicographically smallest) and its log-likelihood.
pub fn grid_search_oracle(
    group: &BinGroup,
    variances: &[f64],
    resolution: f64,
) -> Result<(Vec<f64>, f64)> {
    let m = group.num_models();
    if m > ORACLE_MAX_MODELS {
        return Err(Error::InvalidConfig(format!(
            "grid search supports at most {ORACLE_MAX_MODELS} models, got {m}"
        )));
    }
    if variances.len() != m {
        return Err(Error::ModelCountMismatch {
            expected: m,
            actual: variances.len(),
        });
    }
    if !(resolution > 0.0 && resolution <= 0.5) {
        return Err(Error::InvalidConfig(format!(
            "resolution {resolution} must lie in (0, 0.5]"
        )));
    }
    if group.count() == 0 {
        return Err(Error::Empty("grid search on an empty group".into()));
    }
    let steps = (1.0 / resolution).round() as usize;
    let n = group.count();

    // Per-pixel component densities, relative to the pixel's largest one.
    let mut dens = vec![0.0; n * m];
    let mut shift = vec![0.0; n];
    let means: Vec<f64> = group
        .pred_values
        .iter()
        .map(|p| p.iter().sum::<f64>() / n as f64)
        .collect();
    for (i, &y) in group.gt_values.iter().enumerate() {
        let logs: Vec<f64> = (0..m)
            .map(|k| {
                let v = variances[k];
                -0.5 * ((y - means[k]).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln())
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift[i] = top;
        for k in 0..m {
            dens[i * m + k] = (logs[k] - top).exp();
        }
    }
    let shift_total: f64 = shift.iter().sum();
    let score = |w: &[f64]| -> f64 {
        let mut total = shift_total;
        for i in 0..n {
            let mix: f64 = (0..m).map(|k| w[k] * dens[i * m + k]).sum();
            total += mix.ln();
        }
        total
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |counts: &[usize]| {
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 / steps as f64).collect();
        let s = score(&w);
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((w, s));
        }
    };
    match m {
        1 => consider(&[steps]),
        2 => {
            for a in 0..=steps {
                consider(&[a, steps - a]);
            }
        }
        _ => {
            for a in 0..=steps {
                for b in 0..=steps - a {
                    consider(&[a, b, steps - a - b]);
                }
            }
        }
    }
    Ok(best.expect("grid is non-empty"))
}
