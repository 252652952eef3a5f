use super::{ImageBuffer, ImageError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bilinear,
    Area,
    Nearest,
    Bicubic,
}

/// Integer resampling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Up(usize),
    Down(usize),
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate along one axis.
fn taps(n_in: usize, n_out: usize, scale: Scale, method: Method) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    let clamp = |i: isize| i.clamp(0, n_in as isize - 1) as usize;
    (0..n_out)
        .map(|o| match method {
            Method::Nearest => vec![(((o as f64) * ratio).floor() as usize, 1.0)],
            Method::Area => {
                let Scale::Down(f) = scale else {
                    unreachable!()
                };
                (o * f..o * f + f).map(|i| (i, 1.0 / f as f64)).collect()
            }
            Method::Bilinear => {
                let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = src.floor() as isize;
                let frac = src - i0 as f64;
                vec![(clamp(i0), 1.0 - frac), (clamp(i0 + 1), frac)]
            }
            Method::Bicubic => {
                let src = (o as f64 + 0.5) * ratio - 0.5;
                let i0 = src.floor() as isize;
                let frac = src - i0 as f64;
                (-1..=2)
                    .map(|k| (clamp(i0 + k), cubic(k as f64 - frac)))
                    .collect()
            }
        })
        .collect()
}

/// Resamples by an integer factor. The result is clamped into `[0, 1]`.
pub fn resize(img: &ImageBuffer, scale: Scale, method: Method) -> Result<ImageBuffer, ImageError> {
    let (w, h) = img.dims();
    let (ow, oh) = match scale {
        Scale::Up(0) | Scale::Down(0) => {
            return Err(ImageError::UnsupportedResize { method, scale });
        }
        Scale::Up(1) | Scale::Down(1) => return Ok(img.clone()),
        Scale::Up(f) => {
            if method == Method::Area {
                return Err(ImageError::UnsupportedResize { method, scale });
            }
            (w * f, h * f)
        }
        Scale::Down(f) => {
            if w % f != 0 || h % f != 0 {
                return Err(ImageError::Indivisible {
                    width: w,
                    height: h,
                    factor: f,
                });
            }
            (w / f, h / f)
        }
    };
    let tx = taps(w, ow, scale, method);
    let ty = taps(h, oh, scale, method);
    // Separable: rows first into an f64 scratch buffer, then columns.
    let mut out = Vec::with_capacity(3 * ow * oh);
    let mut rows = vec![0.0f64; h * ow];
    for c in 0..3 {
        let p = img.plane(c);
        for y in 0..h {
            for (ox, t) in tx.iter().enumerate() {
                rows[y * ow + ox] = t.iter().map(|&(i, wt)| wt * p[y * w + i] as f64).sum();
            }
        }
        for t in &ty {
            for ox in 0..ow {
                let v: f64 = t.iter().map(|&(i, wt)| wt * rows[i * ow + ox]).sum();
                out.push(v as f32);
            }
        }
    }
    ImageBuffer::from_planar_clamped(ow, oh, out)
}

/// Mirror index into `0..n` (edge sample not repeated); any offset works.
pub(super) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads by the given margins.
pub fn reflect_pad(
    img: &ImageBuffer,
    left: usize,
    top: usize,
    right: usize,
    bottom: usize,
) -> ImageBuffer {
    let (w, h) = img.dims();
    ImageBuffer::from_fn(w + left + right, h + top + bottom, |c, y, x| {
        let sy = reflect(y as isize - top as isize, h);
        let sx = reflect(x as isize - left as isize, w);
        img.get(c, sy, sx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |c, y, x| {
            ((c + y * w + x) as f32) / (3 * w * h) as f32
        })
    }

    #[test]
    fn factor_one_is_identity() {
        let img = ramp(5, 4);
        for m in [
            Method::Bilinear,
            Method::Nearest,
            Method::Bicubic,
            Method::Area,
        ] {
            assert_eq!(resize(&img, Scale::Down(1), m).unwrap(), img);
        }
        assert_eq!(resize(&img, Scale::Up(1), Method::Bicubic).unwrap(), img);
    }

    #[test]
    fn constant_survives_every_method() {
        let img = ImageBuffer::constant(8, 8, 0.3);
        for m in [Method::Bilinear, Method::Nearest, Method::Bicubic] {
            let up = resize(&img, Scale::Up(4), m).unwrap();
            assert_eq!(up.dims(), (32, 32));
            assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-7), "{m:?}");
        }
        for m in [
            Method::Bilinear,
            Method::Nearest,
            Method::Bicubic,
            Method::Area,
        ] {
            let down = resize(&img, Scale::Down(2), m).unwrap();
            assert!(down.data().iter().all(|&v| (v - 0.3).abs() < 1e-7), "{m:?}");
        }
    }

    #[test]
    fn area_of_bicubic_up_conserves_constant() {
        let img = ImageBuffer::constant(6, 6, 0.55);
        let up = resize(&img, Scale::Up(4), Method::Bicubic).unwrap();
        let down = resize(&up, Scale::Down(4), Method::Area).unwrap();
        assert!(down.data().iter().all(|&v| (v - 0.55).abs() < 1e-7));
    }

    #[test]
    fn area_down_of_ramp_is_block_mean() {
        let img = ImageBuffer::from_fn(4, 4, |_, y, x| (y * 4 + x) as f32 / 15.0);
        let d = resize(&img, Scale::Down(2), Method::Area).unwrap();
        let expect = [2.5, 4.5, 10.5, 12.5].map(|v: f32| v / 15.0);
        for (a, b) in d.plane(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn indivisible_down_is_rejected() {
        let img = ramp(5, 4);
        assert!(matches!(
            resize(&img, Scale::Down(2), Method::Area),
            Err(ImageError::Indivisible { .. })
        ));
        assert!(resize(&img, Scale::Up(2), Method::Area).is_err());
    }

    #[test]
    fn reflect_handles_large_margins() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
        assert_eq!(reflect(9, 4), 3);
        let img = ramp(3, 2);
        let p = reflect_pad(&img, 4, 3, 5, 6);
        assert_eq!(p.dims(), (12, 11));
        assert_eq!(p.get(0, 3, 4), img.get(0, 0, 0));
    }
}
