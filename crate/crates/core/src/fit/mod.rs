//! Per-image fitting: forward, task loss, backward and Adam, repeated.

mod adam;
mod trace;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::image::{psnr, reflect_pad, resize, ssim, ImageBuffer, Method, Scale};
use crate::net::{MedNetwork, MedSpec, NetError};
use crate::rng::{Rng, Stream};
use crate::tasks::{build_targets, task_loss, TaskError, TaskKind, TaskSpec};
use crate::tensor::{Shape, Tensor};

pub use adam::Adam;
pub use trace::{format_g6, trace_csv, TraceRow, TRACE_HEADER};

/// Loss growth over the initial loss that counts as diverging.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
/// Consecutive diverging iterations before a fit is aborted.
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit config, {field}: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("non-finite value from {op} at iteration {iteration}")]
    NonFinite { op: String, iteration: usize },
    #[error("diverged at iteration {iteration}: loss {loss:e} exceeded {factor}x the initial {initial:e} for {patience} iterations")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        factor: f64,
        patience: usize,
    },
}

impl FitError {
    /// NaN or divergence, as opposed to a configuration problem.
    pub fn is_numerical(&self) -> bool {
        matches!(self, FitError::NonFinite { .. } | FitError::Diverged { .. })
    }

    fn numerical(e: NetError, iteration: usize) -> Self {
        match e {
            NetError::Autodiff(AutodiffError::NonFinite { op }) => FitError::NonFinite {
                op: op.to_string(),
                iteration,
            },
            other => other.into(),
        }
    }

    fn numerical_task(e: TaskError, iteration: usize) -> Self {
        match e {
            TaskError::Autodiff(AutodiffError::NonFinite { op }) => FitError::NonFinite {
                op: op.to_string(),
                iteration,
            },
            other => other.into(),
        }
    }
}

fn config_error<T>(field: &str, reason: impl Into<String>) -> Result<T, FitError> {
    Err(FitError::Config {
        field: field.to_string(),
        reason: reason.into(),
    })
}

/// How the network input `z` is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Uniform noise in `[0, 0.1]`.
    Noise,
    /// The corrupted image, bicubic-upsampled for super-resolution.
    Image,
    /// Flash and no-flash images stacked into six channels.
    ConcatFlash,
}

impl InputMode {
    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Denoise | TaskKind::Inpaint => InputMode::Noise,
            TaskKind::SuperResolve => InputMode::Image,
            TaskKind::FlashNoFlash => InputMode::ConcatFlash,
        }
    }
}

/// Which iterate the run returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    Fixed,
    /// The traced iterate with the highest PSNR against the reference.
    BestPsnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub input_mode: InputMode,
    /// Channel count of noise input.
    pub input_channels: usize,
    /// Std of the Gaussian perturbation added to `z` every iteration.
    pub input_noise_std: f64,
    pub seed: u64,
    pub trace_every: usize,
    pub stop_mode: StopMode,
}

pub const DEFAULT_NOISE_CHANNELS: usize = 32;
pub const DEFAULT_TRACE_EVERY: usize = 50;

impl FitConfig {
    pub fn for_task(kind: TaskKind) -> Self {
        let iterations = match kind {
            TaskKind::Denoise => 1800,
            TaskKind::SuperResolve => 2000,
            TaskKind::Inpaint => 3000,
            TaskKind::FlashNoFlash => 2000,
        };
        FitConfig {
            iterations,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            input_mode: InputMode::default_for(kind),
            input_channels: DEFAULT_NOISE_CHANNELS,
            input_noise_std: 0.0,
            seed: 0,
            trace_every: DEFAULT_TRACE_EVERY,
            stop_mode: StopMode::Fixed,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trace_every(mut self, trace_every: usize) -> Self {
        self.trace_every = trace_every;
        self
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.iterations == 0 {
            return config_error("iterations", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_error(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            );
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return config_error(field, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return config_error("adam_eps", format!("must be > 0, got {}", self.adam_eps));
        }
        if self.input_channels == 0 {
            return config_error("input_channels", "must be >= 1");
        }
        if !(self.input_noise_std >= 0.0 && self.input_noise_std.is_finite()) {
            return config_error(
                "input_noise_std",
                format!("must be >= 0, got {}", self.input_noise_std),
            );
        }
        if self.trace_every == 0 {
            return config_error("trace_every", "must be >= 1");
        }
        Ok(())
    }
}

/// Output size and the padded working size; padding goes right and down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadGeometry {
    pub width: usize,
    pub height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
}

impl PadGeometry {
    pub fn new(width: usize, height: usize, divisor: usize) -> Self {
        PadGeometry {
            width,
            height,
            padded_width: width.next_multiple_of(divisor),
            padded_height: height.next_multiple_of(divisor),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.width == self.padded_width && self.height == self.padded_height
    }

    pub fn pad(&self, img: &ImageBuffer) -> ImageBuffer {
        assert_eq!(
            img.dims(),
            (self.width, self.height),
            "image does not match geometry"
        );
        if self.is_identity() {
            return img.clone();
        }
        reflect_pad(
            img,
            0,
            0,
            self.padded_width - self.width,
            self.padded_height - self.height,
        )
    }

    /// Crops a padded image (or one downscaled by `2^level`) back to the
    /// matching unpadded extent.
    pub fn crop(&self, img: &ImageBuffer, level: usize) -> ImageBuffer {
        let f = 1 << level;
        let (w, h) = (self.width.div_ceil(f), self.height.div_ceil(f));
        if img.dims() == (w, h) {
            return img.clone();
        }
        img.crop(0, 0, w, h)
            .expect("padded image covers the output")
    }
}

/// Reflect-pads `img` so both extents are multiples of `divisor`.
pub fn crop_pad_to_divisible(img: &ImageBuffer, divisor: usize) -> (ImageBuffer, PadGeometry) {
    let g = PadGeometry::new(img.width(), img.height(), divisor);
    (g.pad(img), g)
}

/// Pads every image of a task so the network's output is divisible by
/// `divisor`. Returns the padded task and the output geometry.
pub fn pad_task(task: &TaskSpec, divisor: usize) -> (TaskSpec, PadGeometry) {
    let t = task.scale;
    let in_div = (divisor / t).max(1);
    let g_in = PadGeometry::new(task.corrupted.width(), task.corrupted.height(), in_div);
    let out = PadGeometry {
        width: g_in.width * t,
        height: g_in.height * t,
        padded_width: g_in.padded_width * t,
        padded_height: g_in.padded_height * t,
    };
    let padded = TaskSpec {
        kind: task.kind,
        corrupted: g_in.pad(&task.corrupted),
        reference: task.reference.as_ref().map(|r| out.pad(r)),
        mask: task.mask.as_ref().map(|m| {
            m.reflect_pad(
                0,
                0,
                g_in.padded_width - g_in.width,
                g_in.padded_height - g_in.height,
            )
        }),
        flash: task.flash.as_ref().map(|f| g_in.pad(f)),
        scale: t,
        lambda: task.lambda.clone(),
    };
    (padded, out)
}

/// Channel count of `z` for a mode.
pub fn input_channels(mode: InputMode, noise_channels: usize) -> usize {
    match mode {
        InputMode::Noise => noise_channels,
        InputMode::Image => 3,
        InputMode::ConcatFlash => 6,
    }
}

/// Forms the network input for an already padded task.
pub fn prepare_input(
    task: &TaskSpec,
    mode: InputMode,
    noise_channels: usize,
    rng: &mut Rng,
) -> Result<Tensor<f32>, FitError> {
    let (w, h) = task.output_dims();
    match mode {
        InputMode::Noise => {
            let shape = Shape::image(noise_channels, h, w);
            Ok(Tensor::from_fn(shape, |_| rng.uniform(0.0, 0.1) as f32))
        }
        InputMode::Image => {
            if task.scale == 1 {
                Ok(task.corrupted.to_tensor())
            } else {
                let up = resize(&task.corrupted, Scale::Up(task.scale), Method::Bicubic)
                    .map_err(TaskError::from)?;
                Ok(up.to_tensor())
            }
        }
        InputMode::ConcatFlash => {
            let Some(flash) = &task.flash else {
                return config_error("input_mode", "concat_flash needs a flash/no-flash task");
            };
            let mut data = flash.data().to_vec();
            data.extend_from_slice(task.corrupted.data());
            Ok(Tensor::from_vec(Shape::image(6, h, w), data).expect("two RGB planes"))
        }
    }
}

/// Result of one fit.
#[derive(Clone, Debug)]
pub struct RestorationRun {
    /// G head at the selected iterate, cropped to the output size.
    pub restored: ImageBuffer,
    /// Every head at the selected iterate, cropped per level.
    pub heads: Vec<ImageBuffer>,
    pub selected_iteration: usize,
    pub trace: Vec<TraceRow>,
    /// Loss at every iteration `0..=iterations`.
    pub losses: Vec<f64>,
    pub spec: MedSpec,
    pub config: FitConfig,
    pub parameter_count: usize,
    pub geometry: PadGeometry,
    pub elapsed: Duration,
}

impl RestorationRun {
    pub fn final_row(&self) -> &TraceRow {
        self.trace.last().expect("trace has at least one row")
    }

    /// Traced row with the highest PSNR, earliest on ties.
    pub fn best_row(&self) -> Option<&TraceRow> {
        self.trace
            .iter()
            .filter(|r| r.psnr.is_some())
            .fold(None, |best: Option<&TraceRow>, r| match best {
                Some(b) if b.psnr >= r.psnr => Some(b),
                _ => Some(r),
            })
    }

    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }
}

struct Snapshot {
    iteration: usize,
    heads: Vec<ImageBuffer>,
}

/// Fits a freshly built network to `task`.
pub fn fit(
    spec: &MedSpec,
    task: &TaskSpec,
    config: &FitConfig,
) -> Result<RestorationRun, FitError> {
    let start = Instant::now();
    config.validate()?;
    task.validate()?;
    if config.input_mode == InputMode::ConcatFlash && task.kind != TaskKind::FlashNoFlash {
        return config_error("input_mode", "concat_flash needs a flash/no-flash task");
    }
    if config.stop_mode == StopMode::BestPsnr && task.reference.is_none() {
        return config_error("stop_mode", "best_psnr needs a clean reference");
    }
    let mut net = MedNetwork::build(
        spec,
        input_channels(config.input_mode, config.input_channels),
    )?;
    let (padded, geometry) = pad_task(task, net.required_divisor());
    let targets = build_targets(&padded, net.head_count())?;
    let z = prepare_input(
        &padded,
        config.input_mode,
        config.input_channels,
        &mut Rng::stream(config.seed, Stream::Input),
    )?;
    let mut perturb = Rng::stream(config.seed, Stream::InputPerturbation);
    let mut adam = Adam::new(
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );

    let n = config.iterations;
    let mut losses = Vec::with_capacity(n + 1);
    let mut trace = Vec::with_capacity(n / config.trace_every + 2);
    let mut best: Option<(f64, Snapshot)> = None;
    let mut last: Option<Snapshot> = None;
    let mut diverging = 0usize;

    for it in 0..=n {
        let mut g = Graph::<f32>::new();
        let zi = if config.input_noise_std > 0.0 {
            let std = config.input_noise_std;
            let data = z
                .data()
                .iter()
                .map(|&v| v + (std * perturb.normal()) as f32)
                .collect();
            Tensor::from_vec(z.shape(), data).expect("same shape")
        } else {
            z.clone()
        };
        let zn = g.constant(zi);
        let fwd = net
            .forward(&mut g, zn)
            .map_err(|e| FitError::numerical(e, it))?;
        let bound = targets.bind(&mut g);
        let loss = task_loss(&mut g, task.kind, &fwd.heads, &bound, &task.lambda)
            .map_err(|e| FitError::numerical_task(e, it))?;
        let lv = g.value(loss).item() as f64;
        losses.push(lv);

        let initial = losses[0];
        if lv > DIVERGENCE_FACTOR * initial {
            diverging += 1;
            if diverging >= DIVERGENCE_PATIENCE {
                return Err(FitError::Diverged {
                    iteration: it,
                    loss: lv,
                    initial,
                    factor: DIVERGENCE_FACTOR,
                    patience: DIVERGENCE_PATIENCE,
                });
            }
        } else {
            diverging = 0;
        }

        if it % config.trace_every == 0 || it == n {
            let heads: Vec<ImageBuffer> = fwd
                .heads
                .iter()
                .enumerate()
                .map(|(l, &h)| {
                    let img = ImageBuffer::from_tensor(g.value(h)).expect("sigmoid head is RGB");
                    geometry.crop(&img, l)
                })
                .collect();
            let (p, s) = match &task.reference {
                Some(r) => {
                    let p = psnr(&heads[0], r).expect("reference matches output");
                    let s = ssim(&heads[0], r).ok();
                    (Some(p), s)
                }
                None => (None, None),
            };
            log::debug!("iteration {it}: loss {lv:.6} psnr {p:?}");
            trace.push(TraceRow {
                iteration: it,
                loss: lv,
                psnr: p,
                ssim: s,
            });
            let snap = Snapshot {
                iteration: it,
                heads,
            };
            if let Some(p) = p {
                if best.as_ref().is_none_or(|(bp, _)| p > *bp) {
                    best = Some((
                        p,
                        Snapshot {
                            iteration: it,
                            heads: snap.heads.clone(),
                        },
                    ));
                }
            }
            last = Some(snap);
        }
        if it == n {
            break;
        }

        g.backward(loss)
            .map_err(|e| FitError::numerical(e.into(), it))?;
        let grads: Vec<&Tensor<f32>> = fwd
            .params
            .iter()
            .map(|&p| g.grad(p).expect("parameters track gradients"))
            .collect();
        if let Err(i) = adam.step(net.params_mut(), &grads) {
            return Err(FitError::NonFinite {
                op: format!("gradient of {}", net.param_names()[i]),
                iteration: it,
            });
        }
    }

    let chosen = match (config.stop_mode, best) {
        (StopMode::BestPsnr, Some((_, snap))) => snap,
        _ => last.expect("final iterate is always traced"),
    };
    Ok(RestorationRun {
        restored: chosen.heads[0].clone(),
        heads: chosen.heads,
        selected_iteration: chosen.iteration,
        trace,
        losses,
        spec: spec.clone(),
        config: config.clone(),
        parameter_count: net.parameter_count(),
        geometry,
        elapsed: start.elapsed(),
    })
}
