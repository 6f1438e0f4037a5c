use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB image stored row-major as `height x width x 3` with every element
/// in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!(
                "image value {v} outside [0,1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let rgb = rgb.map(|c| c.clamp(0.0, 1.0));
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds an image from arbitrary values, clamping them into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    /// Number of scalar elements, `H * W * C`.
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|e| Error::Encode(format!("{}: {e}", path.display())))
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, out_h: usize, out_w: usize) -> ImageTensor {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let ys = axis_weights(self.height, out_h);
        let xs = axis_weights(self.width, out_w);
        let mut data = Vec::with_capacity(out_h * out_w * CHANNELS);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..CHANNELS {
                    let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
                    let top = lerp(self.get(y0, x0, c), self.get(y0, x1, c), fx);
                    let bottom = lerp(self.get(y1, x0, c), self.get(y1, x1, c), fx);
                    let v = lerp(top, bottom, fy);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        ImageTensor {
            height: out_h,
            width: out_w,
            data,
        }
    }

    /// Copies the rows `y0..y1` and columns `x0..x1`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> ImageTensor {
        let mut data = Vec::with_capacity((y1 - y0) * (x1 - x0) * CHANNELS);
        for y in y0..y1 {
            let start = (y * self.width + x0) * CHANNELS;
            let end = (y * self.width + x1) * CHANNELS;
            data.extend_from_slice(&self.data[start..end]);
        }
        ImageTensor {
            height: y1 - y0,
            width: x1 - x0,
            data,
        }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        to_batch_tensor(std::slice::from_ref(self), dtype, device)
    }
}

fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Stacks images into an `(N, 3, H, W)` tensor.
pub fn to_batch_tensor(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut planar = Vec::with_capacity(images.len() * h * w * CHANNELS);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {}x{}",
                img.height, img.width
            )));
        }
        for c in 0..CHANNELS {
            planar.extend(img.data.iter().skip(c).step_by(CHANNELS).copied());
        }
    }
    let t = Tensor::from_vec(planar, (images.len(), CHANNELS, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Splits an `(N, 3, H, W)` tensor back into images, clamping into `[0, 1]`.
pub fn from_batch_tensor(batch: &Tensor) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = batch.dims4()?;
    if c != CHANNELS {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let flat: Vec<f32> = batch.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    (0..n)
        .map(|i| {
            let base = i * CHANNELS * plane;
            let mut data = Vec::with_capacity(plane * CHANNELS);
            for p in 0..plane {
                for ch in 0..CHANNELS {
                    data.push(flat[base + ch * plane + p]);
                }
            }
            ImageTensor::from_clamped(h, w, data)
        })
        .collect()
}
