//! Image tensors, PNG I/O and the flattened pixel layout.
//!
//! Every image is held as 64-bit reals in `[0, 255]`, interleaved RGB,
//! row-major: the value at row `h`, column `w`, channel `c` lives at
//! `(h * width + w) * 3 + c`. All downstream modules (binning, fusion,
//! metrics) rely on this ordering.

use std::path::Path;

use image::{ColorType, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MAX_VALUE: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyImage { height, width });
        }
        let expected = height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x3 image needs {expected} values, got {}",
                data.len()
            )));
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            if !(0.0..=MAX_VALUE).contains(&v) {
                return Err(Error::OutOfRange(v));
            }
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-sample function, clamping its output into range.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for h in 0..height {
            for w in 0..width {
                for c in 0..CHANNELS {
                    data.push(clamp_value(f(h, w, c)));
                }
            }
        }
        ImageTensor::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        ImageTensor::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The flattened vector in interleaved-RGB row-major order.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[flat_index(self.width, h, w, c)]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Every value rounded and clamped the way [`save_image`] stores it.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f64::from(quantize(v))).collect(),
        }
    }

    /// One channel as a plane.
    pub fn channel(&self, c: usize) -> Plane {
        assert!(c < CHANNELS);
        Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(CHANNELS)
                .copied()
                .collect(),
        }
    }
}

#[inline]
pub fn flat_index(width: usize, h: usize, w: usize, c: usize) -> usize {
    (h * width + w) * CHANNELS + c
}

#[inline]
pub(crate) fn clamp_value(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, MAX_VALUE)
    }
}

/// Round half away from zero, then clamp to an 8-bit code.
#[inline]
pub fn quantize(v: f64) -> u8 {
    clamp_value(v.round()) as u8
}

/// A single-channel image, e.g. the Y channel used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} plane needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }
}

/// BT.601 limited-range luma, `16 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y(img: &ImageTensor) -> Plane {
    let data = img
        .data
        .chunks_exact(CHANNELS)
        .map(|px| pixel_to_y(px[0], px[1], px[2]))
        .collect();
    Plane {
        height: img.height,
        width: img.width,
        data,
    }
}

#[inline]
pub fn pixel_to_y(r: f64, g: f64, b: f64) -> f64 {
    16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            detail: "not a PNG file".into(),
        });
    }
    let decoded = reader.decode().map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    // Palette images arrive already expanded by the PNG decoder.
    match decoded.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                detail: format!("unsupported pixel format {other:?}, expected 8-bit gray or RGB"),
            })
        }
    }
    let rgb = decoded.to_rgb8();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(f64::from).collect();
    ImageTensor::new(height, width, data)
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                source: other,
            },
        })
}

/// Ground truths and per-model predictions concatenated over a reference set.
#[derive(Debug, Clone)]
pub struct ReferenceBatch {
    gt: Vec<f64>,
    preds: Vec<Vec<f64>>,
    num_samples: usize,
}

impl ReferenceBatch {
    /// `preds[m][n]` is model `m`'s prediction for sample `n`.
    pub fn from_images(gts: &[ImageTensor], preds: &[Vec<ImageTensor>]) -> Result<Self> {
        if gts.is_empty() {
            return Err(Error::Empty("reference set has no samples".into()));
        }
        if preds.is_empty() {
            return Err(Error::Empty("reference set has no models".into()));
        }
        for (m, model_preds) in preds.iter().enumerate() {
            if model_preds.len() != gts.len() {
                return Err(Error::ShapeMismatch(format!(
                    "model {m} has {} predictions for {} ground truths",
                    model_preds.len(),
                    gts.len()
                )));
            }
            for (n, (p, g)) in model_preds.iter().zip(gts).enumerate() {
                if !p.same_shape(g) {
                    return Err(Error::ShapeMismatch(format!(
                        "sample {n}: model {m} is {}x{}, ground truth is {}x{}",
                        p.height, p.width, g.height, g.width
                    )));
                }
            }
        }
        let gt = gts.iter().flat_map(|g| g.data.iter().copied()).collect();
        let preds = preds
            .iter()
            .map(|model| model.iter().flat_map(|p| p.data.iter().copied()).collect())
            .collect();
        Ok(ReferenceBatch {
            gt,
            preds,
            num_samples: gts.len(),
        })
    }

    /// A batch from already-concatenated vectors, treated as one sample.
    pub fn from_flat(gt: Vec<f64>, preds: Vec<Vec<f64>>) -> Result<Self> {
        if gt.is_empty() {
            return Err(Error::Empty("reference set has no pixels".into()));
        }
        if preds.is_empty() {
            return Err(Error::Empty("reference set has no models".into()));
        }
        if let Some(bad) = preds.iter().find(|p| p.len() != gt.len()) {
            return Err(Error::ShapeMismatch(format!(
                "prediction length {} differs from ground-truth length {}",
                bad.len(),
                gt.len()
            )));
        }
        if gt
            .iter()
            .chain(preds.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite);
        }
        Ok(ReferenceBatch {
            gt,
            preds,
            num_samples: 1,
        })
    }

    pub fn gt(&self) -> &[f64] {
        &self.gt
    }

    pub fn preds(&self) -> &[Vec<f64>] {
        &self.preds
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_models(&self) -> usize {
        self.preds.len()
    }

    /// Total number of concatenated values, `N * L`.
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}
