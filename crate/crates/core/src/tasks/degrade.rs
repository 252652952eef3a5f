use crate::image::{resize, ImageBuffer, ImageError, Mask, Method, Scale};
use crate::rng::Rng;

/// I.i.d. Gaussian noise of standard deviation `sigma / 255`, one sample
/// per channel and pixel, in planar order.
pub fn noise_field(width: usize, height: usize, sigma: f64, rng: &mut Rng) -> Vec<f32> {
    let std = sigma / 255.0;
    (0..3 * width * height)
        .map(|_| (std * rng.normal()) as f32)
        .collect()
}

/// Additive Gaussian noise with `sigma` on the 0–255 scale, clamped back
/// into `[0, 1]`.
pub fn degrade_noise(img: &ImageBuffer, sigma: f64, rng: &mut Rng) -> ImageBuffer {
    assert!(
        sigma >= 0.0 && sigma.is_finite(),
        "sigma must be >= 0, got {sigma}"
    );
    if sigma == 0.0 {
        return img.clone();
    }
    let noise = noise_field(img.width(), img.height(), sigma, rng);
    let data = img
        .data()
        .iter()
        .zip(&noise)
        .map(|(&v, &n)| v + n)
        .collect();
    ImageBuffer::from_planar_clamped(img.width(), img.height(), data).expect("same extents")
}

/// Area-average downsampling by `t`.
pub fn degrade_downsample(img: &ImageBuffer, t: usize) -> Result<ImageBuffer, ImageError> {
    resize(img, Scale::Down(t), Method::Area)
}

/// Zeroes every channel of the pixels `mask` marks as holes.
pub fn apply_mask(img: &ImageBuffer, mask: &Mask) -> Result<ImageBuffer, ImageError> {
    if (mask.width(), mask.height()) != img.dims() {
        return Err(ImageError::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width(),
            mask.height(),
            img.width(),
            img.height()
        )));
    }
    Ok(ImageBuffer::from_fn(
        img.width(),
        img.height(),
        |c, y, x| {
            if mask.is_kept(y, x) {
                img.get(c, y, x)
            } else {
                0.0
            }
        },
    ))
}

/// Drops exactly `floor(p * H * W)` pixels chosen uniformly at random.
pub fn degrade_mask_random(img: &ImageBuffer, p: f64, rng: &mut Rng) -> (ImageBuffer, Mask) {
    assert!(
        (0.0..1.0).contains(&p),
        "drop fraction must lie in [0, 1), got {p}"
    );
    let n = img.width() * img.height();
    let holes = (p * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..holes {
        let j = i + rng.index(n - i);
        order.swap(i, j);
    }
    let mut keep = vec![true; n];
    for &i in &order[..holes] {
        keep[i] = false;
    }
    let mask = Mask::from_keep(img.width(), img.height(), keep).expect("image extents");
    let out = apply_mask(img, &mask).expect("same extents");
    (out, mask)
}

/// Applies a supplied region mask (text, objects, rectangles).
pub fn degrade_mask_region(
    img: &ImageBuffer,
    mask: &Mask,
) -> Result<(ImageBuffer, Mask), ImageError> {
    Ok((apply_mask(img, mask)?, mask.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};

    #[test]
    fn zero_sigma_is_identity() {
        let img = ImageBuffer::from_fn(8, 8, |c, y, x| (c * 64 + y * 8 + x) as f32 / 192.0);
        assert_eq!(degrade_noise(&img, 0.0, &mut Rng::new(1)), img);
    }

    #[test]
    fn ninety_percent_drop_is_exact() {
        let img = ImageBuffer::constant(100, 100, 0.7);
        let (out, mask) = degrade_mask_random(&img, 0.9, &mut Rng::stream(3, Stream::Degradation));
        assert_eq!(mask.hole_count(), 9000);
        for (i, &k) in mask.keep().iter().enumerate() {
            for c in 0..3 {
                let v = out.plane(c)[i];
                assert_eq!(v, if k { 0.7 } else { 0.0 });
            }
        }
    }

    #[test]
    fn region_holes_are_counted() {
        let img = ImageBuffer::constant(64, 64, 0.4);
        let (_, m) =
            degrade_mask_region(&img, &Mask::with_rect_hole(64, 64, 10, 20, 10, 10)).unwrap();
        assert_eq!(m.hole_count(), 100);
        let (out, _) = degrade_mask_region(&img, &Mask::all_keep(64, 64).inverted()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
