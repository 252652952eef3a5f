use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use super::{ImageBuffer, ImageError, Mask};

/// 8-bit code of a `[0, 1]` sample, rounding half up.
pub(crate) fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
}

impl Decoded {
    fn samples_per_pixel(&self) -> usize {
        self.color.samples()
    }

    /// Sample `i` of the interleaved buffer, scaled to `[0, 1]`.
    fn sample(&self, i: usize) -> f32 {
        match self.depth {
            BitDepth::Sixteen => {
                let v = u16::from_be_bytes([self.bytes[2 * i], self.bytes[2 * i + 1]]);
                v as f32 / 65535.0
            }
            _ => self.bytes[i] as f32 / 255.0,
        }
    }

    fn raw(&self, i: usize) -> u16 {
        match self.depth {
            BitDepth::Sixteen => u16::from_be_bytes([self.bytes[2 * i], self.bytes[2 * i + 1]]),
            _ => self.bytes[i] as u16,
        }
    }
}

fn decode(path: &Path) -> Result<Decoded, ImageError> {
    let file = File::open(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decode_err = |source| ImageError::Decode {
        path: path.to_path_buf(),
        source,
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let (color, depth) = reader.output_color_type();
    if color == ColorType::Indexed {
        return Err(ImageError::UnsupportedColor("indexed".into()));
    }
    if !matches!(depth, BitDepth::Eight | BitDepth::Sixteen) {
        return Err(ImageError::UnsupportedColor(format!(
            "{color:?} at {depth:?}"
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::UnsupportedColor("image too large".into()))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(decode_err)?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color,
        depth,
        bytes,
    })
}

/// Reads an 8- or 16-bit grayscale, RGB or RGBA PNG into `[0, 1]` RGB.
///
/// Gray is replicated into all three channels; alpha is dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let d = decode(path)?;
    let spp = d.samples_per_pixel();
    let has_alpha = matches!(d.color, ColorType::Rgba | ColorType::GrayscaleAlpha);
    if has_alpha {
        log::warn!("{}: dropping alpha channel", path.display());
    }
    let gray = matches!(d.color, ColorType::Grayscale | ColorType::GrayscaleAlpha);
    let n = d.width * d.height;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let src = if gray { 0 } else { c };
            data[c * n + p] = d.sample(p * spp + src);
        }
    }
    Ok(ImageBuffer::from_planar(d.width, d.height, data)?.with_source(path))
}

/// Writes an 8-bit RGB PNG, rounding each sample half up.
pub fn write_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let n = img.width() * img.height();
    let mut bytes = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            bytes.push(quantize(img.data()[c * n + p]));
        }
    }
    write_raw(
        path.as_ref(),
        img.width(),
        img.height(),
        ColorType::Rgb,
        &bytes,
    )
}

fn write_raw(
    path: &Path,
    width: usize,
    height: usize,
    color: ColorType,
    bytes: &[u8],
) -> Result<(), ImageError> {
    let file = File::create(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let encode_err = |source| ImageError::Encode {
        path: path.to_path_buf(),
        source,
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Reads a single-channel mask PNG: 0 is a hole, full scale keeps the
/// pixel, anything else is rejected.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask, ImageError> {
    let path = path.as_ref();
    let d = decode(path)?;
    if d.color != ColorType::Grayscale {
        return Err(ImageError::UnsupportedColor(format!(
            "mask must be single-channel, got {:?}",
            d.color
        )));
    }
    let full = match d.depth {
        BitDepth::Sixteen => u16::MAX,
        _ => 255,
    };
    let keep = (0..d.width * d.height)
        .map(|i| match d.raw(i) {
            0 => Ok(false),
            v if v == full => Ok(true),
            value => Err(ImageError::NotBinary { index: i, value }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Mask::from_keep(d.width, d.height, keep)
}

/// Writes a mask as an 8-bit grayscale PNG (0 = hole, 255 = keep).
pub fn write_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let bytes: Vec<u8> = mask
        .keep()
        .iter()
        .map(|&k| if k { 255 } else { 0 })
        .collect();
    write_raw(
        path.as_ref(),
        mask.width(),
        mask.height(),
        ColorType::Grayscale,
        &bytes,
    )
}
