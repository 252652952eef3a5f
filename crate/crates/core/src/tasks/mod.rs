//! Degradation models, per-level target pyramids and the task losses.
//!
//! Every loss is a weighted sum over the heads the network has: head `l`
//! runs at `1/2^l` of the output resolution and is compared with a target
//! of the same size. Squared errors are averaged, not summed.

mod degrade;
mod loss;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::image::{resize, ImageBuffer, ImageError, Mask, Method, Scale};

pub use degrade::{
    apply_mask, degrade_downsample, degrade_mask_random, degrade_mask_region, degrade_noise,
    noise_field,
};
pub use loss::{loss_denoise, loss_flash, loss_inpaint, loss_sr, task_loss, BoundTargets};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task, {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn invalid<T>(field: &str, reason: impl Into<String>) -> Result<T, TaskError> {
    Err(TaskError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Denoise,
    SuperResolve,
    Inpaint,
    FlashNoFlash,
}

impl TaskKind {
    pub fn key(self) -> &'static str {
        match self {
            TaskKind::Denoise => "denoise",
            TaskKind::SuperResolve => "super_resolve",
            TaskKind::Inpaint => "inpaint",
            TaskKind::FlashNoFlash => "flash_no_flash",
        }
    }

    /// Number of loss weights the task takes.
    pub fn weight_count(self) -> usize {
        match self {
            TaskKind::FlashNoFlash => 2,
            _ => 3,
        }
    }
}

/// One restoration problem.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Corrupted observation; the no-flash image for flash/no-flash.
    pub corrupted: ImageBuffer,
    /// Clean image, used only for metrics.
    pub reference: Option<ImageBuffer>,
    pub mask: Option<Mask>,
    pub flash: Option<ImageBuffer>,
    /// Upscaling factor for super-resolution, 1 otherwise.
    pub scale: usize,
    /// Per-head weights; for flash/no-flash the pyramid weight and the
    /// flash-matching weight.
    pub lambda: Vec<f64>,
}

impl TaskSpec {
    fn new(kind: TaskKind, corrupted: ImageBuffer) -> Self {
        TaskSpec {
            kind,
            corrupted,
            reference: None,
            mask: None,
            flash: None,
            scale: 1,
            lambda: vec![1.0; kind.weight_count()],
        }
    }

    pub fn denoise(noisy: ImageBuffer) -> Self {
        Self::new(TaskKind::Denoise, noisy)
    }

    pub fn super_resolve(low_res: ImageBuffer, scale: usize) -> Self {
        TaskSpec {
            scale,
            ..Self::new(TaskKind::SuperResolve, low_res)
        }
    }

    pub fn inpaint(corrupted: ImageBuffer, mask: Mask) -> Self {
        TaskSpec {
            mask: Some(mask),
            ..Self::new(TaskKind::Inpaint, corrupted)
        }
    }

    pub fn flash_no_flash(flash: ImageBuffer, no_flash: ImageBuffer) -> Self {
        TaskSpec {
            flash: Some(flash),
            ..Self::new(TaskKind::FlashNoFlash, no_flash)
        }
    }

    pub fn with_reference(mut self, reference: ImageBuffer) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_lambda(mut self, lambda: &[f64]) -> Self {
        self.lambda = lambda.to_vec();
        self
    }

    /// Width and height of the restored image.
    pub fn output_dims(&self) -> (usize, usize) {
        let (w, h) = self.corrupted.dims();
        (w * self.scale, h * self.scale)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let n = self.kind.weight_count();
        if self.lambda.len() != n {
            return invalid(
                "lambda",
                format!(
                    "{} takes {n} weights, got {}",
                    self.kind.key(),
                    self.lambda.len()
                ),
            );
        }
        for (i, &l) in self.lambda.iter().enumerate() {
            if !l.is_finite() || l < 0.0 {
                return invalid(
                    &format!("lambda[{i}]"),
                    format!("must be finite and >= 0, got {l}"),
                );
            }
        }
        if self.lambda.iter().all(|&l| l == 0.0) {
            return invalid("lambda", "at least one weight must be positive");
        }
        match self.kind {
            TaskKind::SuperResolve if !matches!(self.scale, 2 | 4) => {
                return invalid("scale", format!("must be 2 or 4, got {}", self.scale));
            }
            TaskKind::SuperResolve => {}
            _ if self.scale != 1 => return invalid("scale", "only super-resolution rescales"),
            _ => {}
        }
        match (&self.mask, self.kind) {
            (None, TaskKind::Inpaint) => return invalid("mask", "inpainting needs a mask"),
            (Some(m), TaskKind::Inpaint) => {
                if (m.width(), m.height()) != self.corrupted.dims() {
                    return invalid("mask", "mask and corrupted image differ in size");
                }
            }
            (Some(_), _) => return invalid("mask", "only inpainting takes a mask"),
            (None, _) => {}
        }
        match (&self.flash, self.kind) {
            (None, TaskKind::FlashNoFlash) => {
                return invalid("flash", "flash/no-flash needs a flash image")
            }
            (Some(f), TaskKind::FlashNoFlash) => {
                if f.dims() != self.corrupted.dims() {
                    return invalid("flash", "flash and no-flash images differ in size");
                }
            }
            (Some(_), _) => return invalid("flash", "only flash/no-flash takes a flash image"),
            (None, _) => {}
        }
        if let Some(r) = &self.reference {
            if r.dims() != self.output_dims() {
                return invalid(
                    "reference",
                    format!(
                        "reference is {}x{}, restored output will be {}x{}",
                        r.width(),
                        r.height(),
                        self.output_dims().0,
                        self.output_dims().1
                    ),
                );
            }
        }
        Ok(())
    }
}

/// Targets (and inpainting masks) for each head.
#[derive(Clone, Debug)]
pub struct PyramidTargets {
    pub targets: Vec<ImageBuffer>,
    pub masks: Option<Vec<Mask>>,
    /// Flash image matched by the G head.
    pub flash: Option<ImageBuffer>,
}

/// Resamples `img` by the ratio `num / den` (both powers of two).
fn rescale(img: &ImageBuffer, num: usize, den: usize) -> Result<ImageBuffer, ImageError> {
    if num == den {
        Ok(img.clone())
    } else if num > den {
        resize(img, Scale::Up(num / den), Method::Bicubic)
    } else {
        resize(img, Scale::Down(den / num), Method::Area)
    }
}

/// Builds targets for `levels` heads.
///
/// Denoising, inpainting and flash/no-flash targets are area-downsampled
/// copies of the observation. Super-resolution level `l` is the
/// low-resolution image resampled by `scale / 2^l`: bicubic upsampling
/// above the input size, the input itself at it, area averaging below.
pub fn build_targets(task: &TaskSpec, levels: usize) -> Result<PyramidTargets, TaskError> {
    task.validate()?;
    if !(1..=3).contains(&levels) {
        return invalid("levels", format!("1 to 3 heads supported, got {levels}"));
    }
    let mut targets = Vec::with_capacity(levels);
    for l in 0..levels {
        let t = match task.kind {
            TaskKind::SuperResolve => rescale(&task.corrupted, task.scale, 1 << l)?,
            _ => rescale(&task.corrupted, 1, 1 << l)?,
        };
        targets.push(t);
    }
    let masks = match &task.mask {
        Some(m) => Some(
            (0..levels)
                .map(|l| m.downsample_nearest(1 << l))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    Ok(PyramidTargets {
        targets,
        masks,
        flash: task.flash.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::constant(w, h, 0.5)
    }

    #[test]
    fn denoise_targets_halve() {
        let t = build_targets(&TaskSpec::denoise(gray(64, 64)), 3).unwrap();
        let dims: Vec<_> = t.targets.iter().map(ImageBuffer::dims).collect();
        assert_eq!(dims, [(64, 64), (32, 32), (16, 16)]);
    }

    #[test]
    fn sr_x4_lowest_level_is_the_input() {
        let lr = ImageBuffer::from_fn(16, 16, |c, y, x| (c + y + x) as f32 / 40.0);
        let t = build_targets(&TaskSpec::super_resolve(lr.clone(), 4), 3).unwrap();
        let dims: Vec<_> = t.targets.iter().map(ImageBuffer::dims).collect();
        assert_eq!(dims, [(64, 64), (32, 32), (16, 16)]);
        assert_eq!(t.targets[2], lr);
    }

    #[test]
    fn inpaint_mask_pyramid_stays_binary() {
        let m = Mask::with_rect_hole(16, 16, 4, 4, 4, 4);
        let t = build_targets(&TaskSpec::inpaint(gray(16, 16), m), 3).unwrap();
        let masks = t.masks.unwrap();
        assert_eq!(masks[1].hole_count(), 4);
        assert_eq!(masks[2].hole_count(), 1);
    }

    #[test]
    fn validation_names_the_key() {
        let err = TaskSpec::denoise(gray(8, 8))
            .with_lambda(&[1.0, -1.0, 1.0])
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("lambda[1]"), "{err}");
        assert!(TaskSpec::denoise(gray(8, 8))
            .with_lambda(&[0.0; 3])
            .validate()
            .is_err());
        assert!(TaskSpec::super_resolve(gray(8, 8), 3).validate().is_err());
        assert!(TaskSpec::flash_no_flash(gray(8, 8), gray(8, 4))
            .validate()
            .is_err());
    }
}
