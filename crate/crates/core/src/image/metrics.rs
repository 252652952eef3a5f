//! PSNR and SSIM on RGB images in `[0, 1]`.

use super::{ImageBuffer, ImageError, Mask};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, ImageError> {
    a.same_dims(b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(psnr_from_mse(sse / a.data().len() as f64))
}

/// PSNR restricted to the pixels `region` keeps (all three channels of
/// each).
pub fn psnr_in_region(a: &ImageBuffer, b: &ImageBuffer, region: &Mask) -> Result<f64, ImageError> {
    a.same_dims(b)?;
    if (region.width(), region.height()) != a.dims() {
        return Err(ImageError::ShapeMismatch(format!(
            "region {}x{} vs image {}x{}",
            region.width(),
            region.height(),
            a.width(),
            a.height()
        )));
    }
    let n = a.width() * a.height();
    let mut sse = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for (p, _) in region.keep().iter().enumerate().filter(|(_, &k)| k) {
            let d = a.data()[c * n + p] as f64 - b.data()[c * n + p] as f64;
            sse += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ImageError::ShapeMismatch("empty region".into()));
    }
    Ok(psnr_from_mse(sse / count as f64))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over every valid (fully inside) window.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity: 11×11 Gaussian windows (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, averaged over RGB.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, ImageError> {
    a.same_dims(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(ImageError::TooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&aa, w, h, &k);
        let e_bb = filter_valid(&bb, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            sum += num / den;
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}
