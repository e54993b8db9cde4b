//! PSNR and SSIM, on RGB or on the BT.601 Y channel, plus set-level reports.
//!
//! Y values are kept unrounded and the peak value stays 255. SSIM uses an
//! 11x11 Gaussian window (sigma 1.5), `C1 = (0.01 * 255)^2`,
//! `C2 = (0.03 * 255)^2`, and averages the SSIM map over valid window
//! positions only (no padding).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::align_dirs;
use crate::error::{Error, Result};
use crate::tensor::{load_image, rgb_to_y, ImageTensor, Plane, CHANNELS, MAX_VALUE};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * MAX_VALUE) * (0.01 * MAX_VALUE);
pub const SSIM_C2: f64 = (0.03 * MAX_VALUE) * (0.03 * MAX_VALUE);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    Rgb,
    Y,
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ChannelMode::Rgb),
            "y" => Ok(ChannelMode::Y),
            other => Err(Error::InvalidConfig(format!(
                "unknown channel mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelMode::Rgb => "rgb",
            ChannelMode::Y => "y",
        })
    }
}

/// `10 log10(255^2 / MSE)`; `+inf` when the inputs are identical.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare {} values with {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("no samples to compare".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (MAX_VALUE * MAX_VALUE / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Valid-mode separable Gaussian filter.
fn filter_valid(src: &[f64], height: usize, width: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; height * ow];
    for h in 0..height {
        let line = &src[h * width..(h + 1) * width];
        for w in 0..ow {
            rows[h * ow + w] = k
                .iter()
                .zip(&line[w..w + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for h in 0..oh {
        for w in 0..ow {
            out[h * ow + w] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * rows[(h + j) * ow + w])
                .sum();
        }
    }
    out
}

pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.height, a.width
        )));
    }
    let (h, w) = (a.height, a.width);
    let k = gaussian_kernel();
    let aa: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&a.data, h, w, &k);
    let mu_b = filter_valid(&b.data, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// PSNR and SSIM of one prediction against its ground truth.
pub fn image_metrics(
    pred: &ImageTensor,
    gt: &ImageTensor,
    mode: ChannelMode,
) -> Result<(f64, f64)> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    match mode {
        ChannelMode::Y => {
            let (py, gy) = (rgb_to_y(pred), rgb_to_y(gt));
            Ok((psnr(&py.data, &gy.data)?, ssim(&py, &gy)?))
        }
        ChannelMode::Rgb => {
            let p = psnr(pred.data(), gt.data())?;
            let mut s = 0.0;
            for c in 0..CHANNELS {
                s += ssim(&pred.channel(c), &gt.channel(c))?;
            }
            Ok((p, s / CHANNELS as f64))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub channel_mode: ChannelMode,
}

/// Decimal rendering used in reports; infinite PSNR prints as `inf`.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Inverse of [`format_metric`].
pub fn parse_metric(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" => Some(f64::INFINITY),
        other => other.parse().ok(),
    }
}

impl MetricReport {
    pub fn from_scores(per_image: Vec<ImageScore>, channel_mode: ChannelMode) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Empty("no pairs found".into()));
        }
        let n = per_image.len() as f64;
        let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(MetricReport {
            per_image,
            mean_psnr,
            mean_ssim,
            channel_mode,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for s in &self.per_image {
            let _ = writeln!(
                out,
                "{},{},{}",
                s.id,
                format_metric(s.psnr),
                format_metric(s.ssim)
            );
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "images={} channel={} mean_psnr={} mean_ssim={}",
            self.per_image.len(),
            self.channel_mode,
            format_metric(self.mean_psnr),
            format_metric(self.mean_ssim)
        )
    }
}

/// Scores every prediction in `pred_dir` against the same-named ground truth in `gt_dir`.
pub fn evaluate_set(pred_dir: &Path, gt_dir: &Path, mode: ChannelMode) -> Result<MetricReport> {
    let pairs = align_dirs(gt_dir, &[pred_dir.to_path_buf()])?;
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let gt = load_image(&pair.primary)?;
        let pred = load_image(&pair.others[0])?;
        let (p, s) = image_metrics(&pred, &gt, mode)?;
        scores.push(ImageScore {
            id: pair.id,
            psnr: p,
            ssim: s,
        });
    }
    MetricReport::from_scores(scores, mode)
}
