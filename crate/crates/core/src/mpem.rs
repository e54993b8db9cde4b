//! EM for a univariate Gaussian mixture with known component means.
//!
//! Each bin group is modelled as a mixture of one Gaussian per base model:
//! component `m` has its mean fixed to the average of model `m`'s predictions
//! inside the group and a variance initialised from the spread of those
//! predictions. EM then alternates posterior responsibilities (E-step) with
//! closed-form updates of the mixture weights and variances (M-step). The
//! means never move. The converged mixture weights are the ensemble weights
//! for the group.
//!
//! All densities are handled in log space with max-subtraction, and every
//! reduction runs over pixels in ascending order so results do not depend on
//! how groups are scheduled across threads.

use serde::{Deserialize, Serialize};

use crate::binning::BinGroup;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative slack allowed when checking that the log-likelihood never decreases.
pub const MONOTONE_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `(1/N) * sum (x - mean)^2`, the same quantity the M-step estimates.
    #[default]
    SampleVariance,
    /// `(1/N) * ||x - mean||_2`, the Euclidean norm of the deviations scaled by `1/N`.
    #[serde(alias = "paper_literal")]
    ScaledNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_steps: usize,
    /// Absolute change of the total log-likelihood that counts as converged.
    pub loglik_tol: f64,
    /// Groups with fewer pixels fall back to averaging weights.
    pub min_pixels: usize,
    /// Lower bound on every variance, in squared intensity units.
    pub variance_floor: f64,
    pub init_mode: InitMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_steps: 1000,
            loglik_tol: 1e-5,
            min_pixels: 100,
            variance_floor: 1e-6,
            init_mode: InitMode::SampleVariance,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        if !(self.loglik_tol > 0.0 && self.loglik_tol.is_finite()) {
            return Err(Error::InvalidConfig("loglik_tol must be positive".into()));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::InvalidConfig(
                "variance_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mixture parameters of one bin group plus the history of the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmBinModel {
    pub means: Vec<f64>,
    /// Variances, not standard deviations.
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    pub count: usize,
    pub converged: bool,
    pub steps_taken: usize,
    /// Total log-likelihood before the first step and after every step.
    pub loglik_trace: Vec<f64>,
}

impl GmmBinModel {
    pub fn num_models(&self) -> usize {
        self.means.len()
    }

    pub fn final_loglik(&self) -> Option<f64> {
        self.loglik_trace.last().copied()
    }

    /// Whether the fit should be discarded in favour of fallback weights.
    ///
    /// Undetermined means any non-finite weight, variance or likelihood, all
    /// variances pinned at the floor, or a likelihood decrease beyond
    /// [`MONOTONE_REL_TOL`].
    pub fn is_undetermined(&self, cfg: &EmConfig) -> bool {
        let non_finite = self
            .weights
            .iter()
            .chain(&self.variances)
            .chain(&self.loglik_trace)
            .any(|v| !v.is_finite());
        let all_floored = self.variances.iter().all(|&v| v <= cfg.variance_floor);
        non_finite || all_floored || !trace_is_monotone(&self.loglik_trace, MONOTONE_REL_TOL)
    }
}

/// True when no entry drops below its predecessor by more than `rel_tol * |prev|`.
pub fn trace_is_monotone(trace: &[f64], rel_tol: f64) -> bool {
    trace
        .windows(2)
        .all(|w| w[1] >= w[0] - rel_tol * w[0].abs())
}

/// Per-pixel posteriors, row-major `count x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    num_models: usize,
    gamma: Vec<f64>,
}

impl Responsibilities {
    pub fn rows(&self) -> usize {
        self.gamma.len().checked_div(self.num_models).unwrap_or(0)
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.num_models..(i + 1) * self.num_models]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_models = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_models) {
            return Err(Error::ShapeMismatch("ragged responsibility rows".into()));
        }
        Ok(Responsibilities {
            num_models,
            gamma: rows.concat(),
        })
    }
}

pub fn gaussian_pdf(y: f64, mean: f64, variance: f64) -> Result<f64> {
    if !(y.is_finite() && mean.is_finite() && variance.is_finite()) {
        return Err(Error::NonFinite);
    }
    if variance <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "variance {variance} must be positive"
        )));
    }
    Ok(log_gaussian_pdf(y, mean, variance).exp())
}

#[inline]
pub fn log_gaussian_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    let d = y - mean;
    -0.5 * (LN_2PI + variance.ln()) - d * d / (2.0 * variance)
}

/// Fixed means, initial variances and uniform weights for a group.
pub fn init_priors(group: &BinGroup, cfg: &EmConfig) -> Result<GmmBinModel> {
    let n = group.count();
    if n == 0 {
        return Err(Error::Empty(format!(
            "bin group {} has no pixels",
            group.key
        )));
    }
    let m = group.num_models();
    if m == 0 {
        return Err(Error::Empty("bin group has no models".into()));
    }
    let nf = n as f64;
    let mut means = Vec::with_capacity(m);
    let mut variances = Vec::with_capacity(m);
    for preds in &group.pred_values {
        let mean = preds.iter().sum::<f64>() / nf;
        let sq: f64 = preds.iter().map(|x| (x - mean) * (x - mean)).sum();
        let init = match cfg.init_mode {
            InitMode::SampleVariance => sq / nf,
            InitMode::ScaledNorm => sq.sqrt() / nf,
        };
        means.push(mean);
        variances.push(init.max(cfg.variance_floor));
    }
    Ok(GmmBinModel {
        means,
        variances,
        weights: vec![1.0 / m as f64; m],
        count: n,
        converged: false,
        steps_taken: 0,
        loglik_trace: Vec::new(),
    })
}

/// `ln(alpha_m) - ln(2 pi var_m) / 2` and `1 / (2 var_m)` per component.
struct Components {
    offset: Vec<f64>,
    inv_two_var: Vec<f64>,
}

impl Components {
    fn new(model: &GmmBinModel) -> Self {
        let offset = model
            .weights
            .iter()
            .zip(&model.variances)
            .map(|(&a, &v)| a.ln() - 0.5 * (LN_2PI + v.ln()))
            .collect();
        let inv_two_var = model.variances.iter().map(|&v| 0.5 / v).collect();
        Components {
            offset,
            inv_two_var,
        }
    }
}

/// Fills `gamma` with the posteriors of `model` and returns the total log-likelihood.
fn e_step_into(group: &BinGroup, model: &GmmBinModel, gamma: &mut [f64]) -> f64 {
    let m = model.num_models();
    let comps = Components::new(model);
    let mut loglik = 0.0;
    for (i, &y) in group.gt_values.iter().enumerate() {
        let row = &mut gamma[i * m..(i + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for (k, slot) in row.iter_mut().enumerate() {
            let d = y - model.means[k];
            let l = comps.offset[k] - d * d * comps.inv_two_var[k];
            *slot = l;
            if l > max {
                max = l;
            }
        }
        if max == f64::NEG_INFINITY || max.is_nan() {
            row.copy_from_slice(&model.weights);
            loglik += max;
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        loglik += max + sum.ln();
    }
    loglik
}

/// Total log-likelihood of the group's ground truth under `model`.
pub fn log_likelihood(group: &BinGroup, model: &GmmBinModel) -> f64 {
    let m = model.num_models();
    let comps = Components::new(model);
    let mut terms = vec![0.0; m];
    let mut loglik = 0.0;
    for &y in &group.gt_values {
        let mut max = f64::NEG_INFINITY;
        for (k, t) in terms.iter_mut().enumerate() {
            let d = y - model.means[k];
            *t = comps.offset[k] - d * d * comps.inv_two_var[k];
            max = max.max(*t);
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        loglik += max + sum.ln();
    }
    loglik
}

pub fn e_step(group: &BinGroup, model: &GmmBinModel) -> Responsibilities {
    let mut gamma = vec![0.0; group.count() * model.num_models()];
    e_step_into(group, model, &mut gamma);
    Responsibilities {
        num_models: model.num_models(),
        gamma,
    }
}

fn m_step_into(group: &BinGroup, gamma: &[f64], model: &mut GmmBinModel, cfg: &EmConfig) {
    let m = model.num_models();
    let mut resp_sum = vec![0.0; m];
    let mut sq_sum = vec![0.0; m];
    for (i, &y) in group.gt_values.iter().enumerate() {
        let row = &gamma[i * m..(i + 1) * m];
        for k in 0..m {
            let d = y - model.means[k];
            resp_sum[k] += row[k];
            sq_sum[k] += row[k] * d * d;
        }
    }
    // Dividing by the summed responsibilities instead of N keeps the weights
    // on the simplex up to a few ulps regardless of N.
    let total: f64 = resp_sum.iter().sum();
    for k in 0..m {
        if resp_sum[k] > 0.0 {
            model.weights[k] = resp_sum[k] / total;
            model.variances[k] = (sq_sum[k] / resp_sum[k]).max(cfg.variance_floor);
        } else {
            model.weights[k] = 0.0;
        }
    }
}

pub fn m_step(
    group: &BinGroup,
    resp: &Responsibilities,
    model: &GmmBinModel,
    cfg: &EmConfig,
) -> Result<GmmBinModel> {
    if resp.num_models != model.num_models() || resp.rows() != group.count() {
        return Err(Error::ShapeMismatch(format!(
            "responsibilities are {}x{}, group needs {}x{}",
            resp.rows(),
            resp.num_models,
            group.count(),
            model.num_models()
        )));
    }
    let mut next = model.clone();
    m_step_into(group, &resp.gamma, &mut next, cfg);
    Ok(next)
}

/// Runs EM from [`init_priors`].
pub fn run_mpem(group: &BinGroup, cfg: &EmConfig) -> Result<GmmBinModel> {
    let init = init_priors(group, cfg)?;
    Ok(run_mpem_from(group, init, cfg, |_| {}))
}

/// Runs EM from explicit starting parameters, calling `on_step` after every M-step.
///
/// Stops once the total log-likelihood changes by less than `cfg.loglik_tol`
/// or after `cfg.max_steps` M-steps.
pub fn run_mpem_from(
    group: &BinGroup,
    mut model: GmmBinModel,
    cfg: &EmConfig,
    mut on_step: impl FnMut(&GmmBinModel),
) -> GmmBinModel {
    let m = model.num_models();
    let mut gamma = vec![0.0; group.count() * m];
    model.count = group.count();
    model.loglik_trace.clear();
    model.steps_taken = 0;
    model.converged = false;
    loop {
        let ll = e_step_into(group, &model, &mut gamma);
        let prev = model.loglik_trace.last().copied();
        model.loglik_trace.push(ll);
        if !ll.is_finite() {
            break;
        }
        if let Some(prev) = prev {
            if (ll - prev).abs() < cfg.loglik_tol {
                model.converged = true;
                break;
            }
        }
        if model.steps_taken >= cfg.max_steps {
            break;
        }
        m_step_into(group, &gamma, &mut model, cfg);
        model.steps_taken += 1;
        on_step(&model);
    }
    model
}
