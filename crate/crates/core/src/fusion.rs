//! Fusing M prediction images into one: range-wise LUT weights, plain
//! averaging, and per-image inverse-MSE weights.

use crate::binning::partition_prediction;
use crate::error::{Error, Result};
use crate::lut::{check_simplex, WeightLut};
use crate::tensor::{clamp_value, ImageTensor};

/// Zero-MSE guard for inverse-MSE weights.
pub const ZZPM_EPSILON: f64 = 1e-12;

/// One weight per model, shared by every pixel of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalWeights {
    beta: Vec<f64>,
}

impl GlobalWeights {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Empty("no weights".into()));
        }
        check_simplex(&beta)?;
        Ok(GlobalWeights { beta })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.beta
    }
}

fn check_shapes(preds: &[ImageTensor]) -> Result<()> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Empty("no predictions to fuse".into()))?;
    if let Some(bad) = preds.iter().find(|p| !p.same_shape(first)) {
        return Err(Error::ShapeMismatch(format!(
            "predictions are {}x{} and {}x{}",
            first.height(),
            first.width(),
            bad.height(),
            bad.width()
        )));
    }
    Ok(())
}

fn assemble(like: &ImageTensor, data: Vec<f64>) -> ImageTensor {
    let data = data.into_iter().map(clamp_value).collect();
    ImageTensor::new(like.height(), like.width(), data).expect("fused image keeps input shape")
}

/// Per-pixel weighted sum with weights looked up from each pixel's bin set.
pub fn fuse_with_lut(preds: &[ImageTensor], lut: &WeightLut) -> Result<ImageTensor> {
    check_shapes(preds)?;
    if preds.len() != lut.num_models {
        return Err(Error::ModelCountMismatch {
            expected: lut.num_models,
            actual: preds.len(),
        });
    }
    let slices: Vec<&[f64]> = preds.iter().map(ImageTensor::data).collect();
    let groups = partition_prediction(&slices, &lut.space)?;
    let mut out = vec![0.0; preds[0].len()];
    for (key, positions) in &groups {
        let weights = lut.weights_for(key.indices());
        for &i in positions {
            out[i] = weights.iter().zip(&slices).map(|(w, p)| w * p[i]).sum();
        }
    }
    Ok(assemble(&preds[0], out))
}

pub fn fuse_average(preds: &[ImageTensor]) -> Result<ImageTensor> {
    check_shapes(preds)?;
    let m = preds.len() as f64;
    let out = (0..preds[0].len())
        .map(|i| preds.iter().map(|p| p.data()[i]).sum::<f64>() / m)
        .collect();
    Ok(assemble(&preds[0], out))
}

pub fn fuse_global(preds: &[ImageTensor], weights: &GlobalWeights) -> Result<ImageTensor> {
    check_shapes(preds)?;
    if weights.beta.len() != preds.len() {
        return Err(Error::ModelCountMismatch {
            expected: weights.beta.len(),
            actual: preds.len(),
        });
    }
    let out = (0..preds[0].len())
        .map(|i| {
            weights
                .beta
                .iter()
                .zip(preds)
                .map(|(w, p)| w * p.data()[i])
                .sum()
        })
        .collect();
    Ok(assemble(&preds[0], out))
}

/// Weights each prediction by the inverse of its MSE against the prediction average.
pub fn zzpm_weights(preds: &[ImageTensor]) -> Result<GlobalWeights> {
    check_shapes(preds)?;
    if preds.len() < 2 {
        return Err(Error::InvalidConfig(
            "inverse-MSE weighting needs at least two predictions".into(),
        ));
    }
    let avg = fuse_average(preds)?;
    let inv: Vec<f64> = preds
        .iter()
        .map(|p| {
            let mse = p
                .data()
                .iter()
                .zip(avg.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / p.len() as f64;
            1.0 / (mse + ZZPM_EPSILON)
        })
        .collect();
    let total: f64 = inv.iter().sum();
    GlobalWeights::new(inv.iter().map(|v| v / total).collect())
}

pub fn fuse_zzpm(preds: &[ImageTensor]) -> Result<(ImageTensor, GlobalWeights)> {
    let weights = zzpm_weights(preds)?;
    let fused = fuse_global(preds, &weights)?;
    Ok((fused, weights))
}
