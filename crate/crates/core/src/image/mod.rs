//! RGB image buffers, PNG I/O, resampling and quality metrics.

mod io;
mod mask;
pub mod metrics;
mod resize;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

pub use io::{read_mask_png, read_png, write_mask_png, write_png};
pub use mask::Mask;
pub use metrics::{psnr, psnr_in_region, ssim};
pub use resize::{reflect_pad, resize, Method, Scale};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image extents must be >= 1, got {width}x{height}")]
    Empty { width: usize, height: usize },
    #[error("expected {expected} samples, got {got}")]
    Length { expected: usize, got: usize },
    #[error("sample {value} at index {index} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{width}x{height} is not divisible by {factor}")]
    Indivisible {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("mask is not binary: value {value} at pixel {index}")]
    NotBinary { index: usize, value: u16 },
    #[error("unsupported PNG color type {0}")]
    UnsupportedColor(String),
    #[error("{method:?} does not support {scale:?}")]
    UnsupportedResize { method: Method, scale: Scale },
    #[error("malformed PNG {path}: {source}")]
    Decode {
        path: PathBuf,
        source: png::DecodingError,
    },
    #[error("cannot encode PNG {path}: {source}")]
    Encode {
        path: PathBuf,
        source: png::EncodingError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Planar RGB image with samples in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    /// Channel-major: all red samples, then green, then blue.
    data: Vec<f32>,
    source: Option<PathBuf>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    /// Builds an image from planar RGB samples, rejecting values outside
    /// `[0, 1]` (NaN included).
    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        let expected = 3 * width * height;
        if data.len() != expected {
            return Err(ImageError::Length {
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
            source: None,
        })
    }

    /// Planar samples, clamped into `[0, 1]` (NaN becomes 0).
    pub fn from_planar_clamped(
        width: usize,
        height: usize,
        mut data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_planar(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self::from_planar(width, height, vec![value; 3 * width * height])
            .expect("constant image with in-range value")
    }

    /// `f(channel, y, x)` evaluated at every sample, clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_planar_clamped(width, height, data).expect("extents checked by caller")
    }

    /// Converts a `(1, 3, h, w)` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.batch() != 1 || s.channels() != 3 {
            return Err(ImageError::ShapeMismatch(format!(
                "expected a (1,3,h,w) tensor, got {s}"
            )));
        }
        Self::from_planar_clamped(s.width(), s.height(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::image(3, self.height, self.width), self.data.clone())
            .expect("image buffer is a valid tensor")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.width * self.height;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source = Some(path.into());
        self
    }

    pub(crate) fn same_dims(&self, other: &ImageBuffer) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Rectangular window `[x, x+w) × [y, y+h)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self, ImageError> {
        if x + w > self.width || y + h > self.height {
            return Err(ImageError::ShapeMismatch(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |c, yy, xx| self.get(c, y + yy, x + xx)))
    }

    /// Samples quantized to 8 bits and back, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| io::quantize(v) as f32 / 255.0)
            .collect();
        ImageBuffer {
            data,
            ..self.clone()
        }
    }
}
