//! Dense image buffers in row-major H×W×C layout with values in [0,1].

use crate::Real;

/// An H×W×C image. Channel is the fastest-varying index.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<S> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<S>,
}

impl<S: Real> Image<S> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![S::zero(); height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut S {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Decode an 8-bit RGB image into [0,1].
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let scale = S::lit(1.0 / 255.0);
        let data = img
            .as_raw()
            .iter()
            .map(|&b| S::lit(b as f64) * scale)
            .collect();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }

    /// Quantize to 8-bit RGB. Requires 3 channels; values are clamped.
    pub fn to_rgb8(&self) -> image::RgbImage {
        assert_eq!(self.channels, 3, "to_rgb8 needs a 3-channel image");
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                let x = v.to_f64().clamp(0.0, 1.0);
                (x * 255.0).round() as u8
            })
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("raw buffer matches dimensions")
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).to_f64().abs())
            .sum();
        sum / self.data.len() as f64
    }
}
