//! In-memory image buffer: C channels of H x W f64 pixels in [0, 1],
//! channel-major layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageBuf {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageBuf {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    pub fn from_pixels(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::data(format!(
                "image buffer: {} pixels for {channels}x{height}x{width}",
                pixels.len()
            )));
        }
        Ok(ImageBuf {
            channels,
            height,
            width,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Quantizes every pixel onto the u16 grid used by the on-disk format,
    /// so that export followed by load is lossless.
    pub fn quantize_u16(&mut self) {
        for v in &mut self.pixels {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            *v = q as f64 / 65535.0;
        }
    }
}
