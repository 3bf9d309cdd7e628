//! 3-channel images with values in [0, 1], stored channel-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ShapeMismatch(format!(
                "pixel {i} out of [0,1]: {}",
                data[i]
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; Self::CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, &v) in rgb.iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![Self::CHANNELS, self.height, self.width],
            self.data.clone(),
        )
        .expect("image data is always finite")
    }

    /// Rebuilds an image from raw values, clamping into [0, 1].
    pub fn from_values_clamped(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let data: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(height, width, data)
    }

    /// Largest absolute per-pixel difference against another image.
    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
