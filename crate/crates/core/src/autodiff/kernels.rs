//! Forward and backward kernels over raw NCHW slices.
//!
//! Every kernel visits its inputs in a fixed order, so results are
//! bit-identical from run to run.

use crate::tensor::Element;

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        [batch, in_ch, in_h, in_w]: [usize; 4],
        [out_ch, _, kh, kw]: [usize; 4],
        stride: usize,
    ) -> Self {
        let pad = (kh - 1) / 2;
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies
    /// inside the image.
    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // A tap past the right edge of the padded row reaches no column.
        let hi = match (self.in_w - 1 + self.pad).checked_sub(kx) {
            Some(span) => (span / self.stride + 1).min(self.out_w),
            None => 0,
        };
        (lo, hi)
    }

    #[inline]
    fn row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.in_h).then_some(iy)
    }
}

impl ConvGeom {
    /// Rows of the unfolded input: one per `(ic, ky, kx)`.
    fn k(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1 stride-1 convolution reads its input unchanged.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Unfolds one image into a `k() x p()` matrix (zero outside).
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let (ip, p) = (self.in_h * self.in_w, self.p());
        cols.fill(T::zero());
        for ic in 0..self.in_ch {
            let xin = &x[ic * ip..][..ip];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((ic * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi) = self.cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let Some(iy) = self.row(oy, ky) else { continue };
                        let irow = &xin[iy * self.in_w..][..self.in_w];
                        let orow = &mut row[oy * self.out_w..][lo..hi];
                        let start = lo * self.stride + kx - self.pad;
                        for (o, &v) in orow
                            .iter_mut()
                            .zip(irow[start..].iter().step_by(self.stride))
                        {
                            *o = v;
                        }
                    }
                }
            }
        }
    }

    /// Adds an unfolded gradient back onto the image it came from.
    fn col2im<T: Element>(&self, cols: &[T], gx: &mut [T]) {
        let (ip, p) = (self.in_h * self.in_w, self.p());
        for ic in 0..self.in_ch {
            let gxi = &mut gx[ic * ip..][..ip];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((ic * self.kh + ky) * self.kw + kx) * p..][..p];
                    let (lo, hi) = self.cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let Some(iy) = self.row(oy, ky) else { continue };
                        let xrow = &mut gxi[iy * self.in_w..][..self.in_w];
                        let grow = &row[oy * self.out_w..][lo..hi];
                        let start = lo * self.stride + kx - self.pad;
                        for (xv, &gv) in xrow[start..].iter_mut().step_by(self.stride).zip(grow) {
                            *xv += gv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let ip = g.in_ch * g.in_h * g.in_w;
    let mut out = vec![T::zero(); g.batch * g.out_ch * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.batch {
        let xn = &x[n * ip..][..ip];
        let on = &mut out[n * g.out_ch * p..][..g.out_ch * p];
        for (oc, o) in on.chunks_exact_mut(p).enumerate() {
            o.fill(b[oc]);
        }
        let unfolded: &[T] = if g.is_pointwise() {
            xn
        } else {
            g.im2col(xn, &mut cols);
            &cols
        };
        T::gemm(
            g.out_ch,
            k,
            p,
            T::one(),
            (w, k as isize, 1),
            (unfolded, p as isize, 1),
            T::one(),
            (on, p as isize, 1),
        );
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let ip = g.in_ch * g.in_h * g.in_w;
    let op = g.out_ch * p;
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.batch {
        let go = &gout[n * op..][..op];
        if let Some(gw) = gw.as_mut() {
            let unfolded: &[T] = if g.is_pointwise() {
                &x[n * ip..][..ip]
            } else {
                g.im2col(&x[n * ip..][..ip], &mut cols);
                &cols
            };
            // gw[oc, kk] += Σ_p gout[oc, p] · cols[kk, p]
            T::gemm(
                g.out_ch,
                p,
                k,
                T::one(),
                (go, p as isize, 1),
                (unfolded, 1, p as isize),
                T::one(),
                (gw, k as isize, 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * ip..][..ip];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.out_ch,
                    p,
                    T::one(),
                    (w, 1, k as isize),
                    (go, p as isize, 1),
                    T::zero(),
                    (gxn, p as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.out_ch,
                    p,
                    T::one(),
                    (w, 1, k as isize),
                    (go, p as isize, 1),
                    T::zero(),
                    (&mut cols, p as isize, 1),
                );
                g.col2im(&cols, gxn);
            }
        }
    }

    let gb = want_b.then(|| {
        (0..g.out_ch)
            .map(|oc| {
                (0..g.batch)
                    .map(|n| sum(&gout[(n * g.out_ch + oc) * p..][..p]))
                    .fold(T::zero(), |a, b| a + b)
            })
            .collect()
    });

    (gx, gw, gb)
}

#[inline]
fn sum<T: Element>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// Saved context of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormContext<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization with statistics over batch and space.
pub(crate) fn batch_norm_forward<T: Element>(
    x: &[T],
    [batch, ch, h, w]: [usize; 4],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, NormContext<T>) {
    let plane = h * w;
    let count = (batch * plane) as f64;
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(ch);
    for c in 0..ch {
        let planes = || (0..batch).map(move |n| (n * ch + c) * plane);
        let mut s = 0.0;
        for start in planes() {
            s += x[start..start + plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let mean = s / count;
        let mut ss = 0.0;
        for start in planes() {
            ss += x[start..start + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = ss / count;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(T::of(istd));
        let (g, b) = (gamma[c], beta[c]);
        for start in planes() {
            for i in start..start + plane {
                let xh = T::of((x[i].as_f64() - mean) * istd);
                normalized[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    (
        out,
        NormContext {
            normalized,
            inv_std,
        },
    )
}

pub(crate) fn batch_norm_backward<T: Element>(
    gout: &[T],
    [batch, ch, h, w]: [usize; 4],
    gamma: &[T],
    ctx: &NormContext<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * w;
    let count = T::of((batch * plane) as f64);
    let mut gx = vec![T::zero(); gout.len()];
    let mut ggamma = vec![T::zero(); ch];
    let mut gbeta = vec![T::zero(); ch];
    for c in 0..ch {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..batch {
            let start = (n * ch + c) * plane;
            for i in start..start + plane {
                sum_g += gout[i];
                sum_gx += gout[i] * ctx.normalized[i];
            }
        }
        gbeta[c] = sum_g;
        ggamma[c] = sum_gx;
        let k = gamma[c] * ctx.inv_std[c] / count;
        for n in 0..batch {
            let start = (n * ch + c) * plane;
            for i in start..start + plane {
                gx[i] = k * (count * gout[i] - sum_g - ctx.normalized[i] * sum_gx);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Source taps of one output coordinate under ×2 bilinear upsampling
/// with half-pixel centers (align-corners = false).
#[inline]
fn bilinear_taps(o: usize, n: usize) -> (usize, usize, f64, f64) {
    let i = o / 2;
    if o.is_multiple_of(2) {
        (i.saturating_sub(1), i, 0.25, 0.75)
    } else {
        (i, (i + 1).min(n - 1), 0.75, 0.25)
    }
}

pub(crate) fn upsample2_forward<T: Element>(x: &[T], [batch, ch, h, w]: [usize; 4]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); batch * ch * oh * ow];
    for p in 0..batch * ch {
        let xi = &x[p * h * w..][..h * w];
        let o = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = bilinear_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = bilinear_taps(ox, w);
                let v = T::of(wy0 * wx0) * xi[y0 * w + x0]
                    + T::of(wy0 * wx1) * xi[y0 * w + x1]
                    + T::of(wy1 * wx0) * xi[y1 * w + x0]
                    + T::of(wy1 * wx1) * xi[y1 * w + x1];
                o[oy * ow + ox] = v;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Element>(gout: &[T], [batch, ch, h, w]: [usize; 4]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); batch * ch * h * w];
    for p in 0..batch * ch {
        let go = &gout[p * oh * ow..][..oh * ow];
        let gi = &mut gx[p * h * w..][..h * w];
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = bilinear_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = bilinear_taps(ox, w);
                let g = go[oy * ow + ox];
                gi[y0 * w + x0] += T::of(wy0 * wx0) * g;
                gi[y0 * w + x1] += T::of(wy0 * wx1) * g;
                gi[y1 * w + x0] += T::of(wy1 * wx0) * g;
                gi[y1 * w + x1] += T::of(wy1 * wx1) * g;
            }
        }
    }
    gx
}

/// Non-overlapping `factor`×`factor` block means.
pub(crate) fn downsample_forward<T: Element>(
    x: &[T],
    [batch, ch, h, w]: [usize; 4],
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![T::zero(); batch * ch * oh * ow];
    for p in 0..batch * ch {
        let xi = &x[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = &xi[(oy * factor + dy) * w + ox * factor..][..factor];
                    s += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                out[(p * oh + oy) * ow + ox] = T::of(s * inv);
            }
        }
    }
    out
}

pub(crate) fn downsample_backward<T: Element>(
    gout: &[T],
    [batch, ch, h, w]: [usize; 4],
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut gx = vec![T::zero(); batch * ch * h * w];
    for p in 0..batch * ch {
        for y in 0..h {
            for x in 0..w {
                gx[(p * h + y) * w + x] = gout[(p * oh + y / factor) * ow + x / factor] * inv;
            }
        }
    }
    gx
}
