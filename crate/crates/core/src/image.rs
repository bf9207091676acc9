use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid("image data length does not match dimensions"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    /// Quantizes to 8-bit samples (as stored in binary PPM).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }
}
