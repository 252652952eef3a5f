use crate::tensor::{Shape, Tensor};

use super::ImageError;

/// Binary pixel mask: `true` keeps a pixel, `false` marks a hole.
///
/// One mask value covers all three channels of a pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn from_keep(width: usize, height: usize, keep: Vec<bool>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        if keep.len() != width * height {
            return Err(ImageError::Length {
                expected: width * height,
                got: keep.len(),
            });
        }
        Ok(Mask {
            width,
            height,
            keep,
        })
    }

    pub fn all_keep(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            keep: vec![true; width * height],
        }
    }

    /// Mask with a rectangular hole `[x, x+w) × [y, y+h)`, clipped to the
    /// image.
    pub fn with_rect_hole(
        width: usize,
        height: usize,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    ) -> Self {
        let mut m = Self::all_keep(width, height);
        for yy in y..(y + h).min(height) {
            for xx in x..(x + w).min(width) {
                m.keep[yy * width + xx] = false;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, y: usize, x: usize) -> bool {
        self.keep[y * self.width + x]
    }

    pub fn hole_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Swaps holes and kept pixels.
    pub fn inverted(&self) -> Self {
        Mask {
            keep: self.keep.iter().map(|k| !k).collect(),
            ..self.clone()
        }
    }

    /// Nearest-neighbour downsampling (top-left sample of each block);
    /// stays binary.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self, ImageError> {
        if !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(ImageError::Indivisible {
                width: self.width,
                height: self.height,
                factor,
            });
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let keep = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.is_kept(y * factor, x * factor))
            .collect();
        Ok(Mask {
            width: w,
            height: h,
            keep,
        })
    }

    /// Reflect-pads by the given margins, mirroring [`super::reflect_pad`].
    pub fn reflect_pad(&self, left: usize, top: usize, right: usize, bottom: usize) -> Self {
        let (w, h) = (self.width + left + right, self.height + top + bottom);
        let keep = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| {
                let sy = super::resize::reflect(y as isize - top as isize, self.height);
                let sx = super::resize::reflect(x as isize - left as isize, self.width);
                self.is_kept(sy, sx)
            })
            .collect();
        Mask {
            width: w,
            height: h,
            keep,
        }
    }

    /// `(1, 3, h, w)` tensor of 0/1 values, the mask broadcast over RGB.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane: Vec<f32> = self
            .keep
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor::from_vec(Shape::image(3, self.height, self.width), data).expect("mask tensor")
    }
}
