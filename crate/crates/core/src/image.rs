use crate::error::{Error, Result};

/// Interleaved 8-bit raster, `channels` samples per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePatch {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn from_raw(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Rec. 601 luma in `[0, 1]`. Single-channel images return the sample itself.
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        let p = self.pixel(x, y);
        let v = if self.channels >= 3 {
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        } else {
            p[0] as f64
        };
        v / 255.0
    }
}
