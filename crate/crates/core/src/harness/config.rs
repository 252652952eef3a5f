use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{invalid, HarnessError, Result};
use crate::fit::FitConfig;
use crate::image::{read_mask_png, read_png, ImageBuffer, Mask};
use crate::net::MedSpec;
use crate::rng::{Rng, Stream};
use crate::tasks::{
    degrade_downsample, degrade_mask_random, degrade_mask_region, degrade_noise, TaskKind, TaskSpec,
};

/// Synthetic corruption applied to `task.clean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Degradation {
    /// Additive Gaussian noise, `sigma` on the 0-255 scale.
    Noise {
        sigma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Area downsampling by `factor`.
    Downsample { factor: usize },
    /// Drops `floor(p * H * W)` random pixels.
    RandomDrop {
        p: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Rectangular hole.
    Region {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
}

impl Degradation {
    pub fn kind(&self) -> TaskKind {
        match self {
            Degradation::Noise { .. } => TaskKind::Denoise,
            Degradation::Downsample { .. } => TaskKind::SuperResolve,
            Degradation::RandomDrop { .. } | Degradation::Region { .. } => TaskKind::Inpaint,
        }
    }

    /// Fills an unset seed.
    pub fn with_default_seed(self, default: u64) -> Self {
        match self {
            Degradation::Noise { sigma, seed } => Degradation::Noise {
                sigma,
                seed: Some(seed.unwrap_or(default)),
            },
            Degradation::RandomDrop { p, seed } => Degradation::RandomDrop {
                p,
                seed: Some(seed.unwrap_or(default)),
            },
            other => other,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match *self {
            Degradation::Noise { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => invalid(
                &format!("{field}.sigma"),
                format!("must be >= 0, got {sigma}"),
            ),
            Degradation::Downsample { factor } if !matches!(factor, 2 | 4) => invalid(
                &format!("{field}.factor"),
                format!("must be 2 or 4, got {factor}"),
            ),
            Degradation::RandomDrop { p, .. } if !(0.0..1.0).contains(&p) => invalid(
                &format!("{field}.p"),
                format!("must lie in [0, 1), got {p}"),
            ),
            Degradation::Region { width, height, .. } if width == 0 || height == 0 => {
                invalid(field, "region must be non-empty")
            }
            _ => Ok(()),
        }
    }

    /// Corrupts `clean`; returns the observation and, for inpainting, the
    /// mask.
    pub fn apply(&self, clean: &ImageBuffer) -> Result<(ImageBuffer, Option<Mask>)> {
        let rng = |seed: Option<u64>| Rng::stream(seed.unwrap_or(0), Stream::Degradation);
        Ok(match *self {
            Degradation::Noise { sigma, seed } => {
                (degrade_noise(clean, sigma, &mut rng(seed)), None)
            }
            Degradation::Downsample { factor } => (degrade_downsample(clean, factor)?, None),
            Degradation::RandomDrop { p, seed } => {
                let (img, mask) = degrade_mask_random(clean, p, &mut rng(seed));
                (img, Some(mask))
            }
            Degradation::Region {
                x,
                y,
                width,
                height,
            } => {
                let (w, h) = clean.dims();
                if x + width > w || y + height > h {
                    return invalid(
                        "task.degradation",
                        format!("region {width}x{height} at ({x},{y}) leaves the {w}x{h} image"),
                    );
                }
                let mask = Mask::with_rect_hole(w, h, x, y, width, height);
                let (img, mask) = degrade_mask_region(clean, &mask)?;
                (img, Some(mask))
            }
        })
    }
}

/// Where the task's images come from. Either `input` (an already corrupted
/// observation) or `clean` plus a `degradation` (or, for inpainting, a
/// `mask`) must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Corrupted observation; the no-flash image for flash/no-flash.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Clean image to corrupt; also the reference when none is given.
    #[serde(default)]
    pub clean: Option<PathBuf>,
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub flash: Option<PathBuf>,
    #[serde(default)]
    pub degradation: Option<Degradation>,
    #[serde(default)]
    pub scale: Option<usize>,
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
}

impl TaskConfig {
    /// Resolves paths against `base`, checks they exist and fills every
    /// default so the result is self-describing.
    pub fn resolve(mut self, base: &Path, default_seed: u64) -> Result<Self> {
        for (key, slot) in [
            ("input", &mut self.input),
            ("clean", &mut self.clean),
            ("reference", &mut self.reference),
            ("mask", &mut self.mask),
            ("flash", &mut self.flash),
        ] {
            if let Some(p) = slot {
                let full = base.join(&*p);
                if !full.is_file() {
                    return invalid(
                        &format!("task.{key}"),
                        format!("no such file: {}", full.display()),
                    );
                }
                *p = full;
            }
        }
        let kind = self.kind;
        match (&self.input, &self.clean) {
            (Some(_), Some(_)) => {
                return invalid(
                    "task.clean",
                    "give either task.input or task.clean, not both",
                )
            }
            (None, None) => {
                return invalid("task.input", "one of task.input or task.clean is required")
            }
            _ => {}
        }
        if let Some(d) = self.degradation.take() {
            if self.clean.is_none() {
                return invalid("task.degradation", "only applies to task.clean");
            }
            d.validate("task.degradation")?;
            if d.kind() != kind {
                return invalid(
                    "task.degradation",
                    format!(
                        "a {} degradation cannot feed a {} task",
                        d.kind().key(),
                        kind.key()
                    ),
                );
            }
            self.degradation = Some(d.with_default_seed(default_seed));
        } else if self.clean.is_some() && !(kind == TaskKind::Inpaint && self.mask.is_some()) {
            return invalid("task.degradation", "required with task.clean");
        }
        if self.clean.is_some() && self.reference.is_none() {
            self.reference = self.clean.clone();
        }
        match kind {
            TaskKind::Inpaint => {
                if self.mask.is_none()
                    && !matches!(
                        self.degradation,
                        Some(Degradation::RandomDrop { .. } | Degradation::Region { .. })
                    )
                {
                    return invalid("task.mask", "inpainting needs a mask or a mask degradation");
                }
                if self.mask.is_some() && self.degradation.is_some() {
                    return invalid(
                        "task.mask",
                        "give either task.mask or a mask degradation, not both",
                    );
                }
            }
            _ if self.mask.is_some() => {
                return invalid("task.mask", "only inpainting takes a mask")
            }
            _ => {}
        }
        match (kind, &self.flash) {
            (TaskKind::FlashNoFlash, None) => {
                return invalid("task.flash", "flash/no-flash needs a flash image")
            }
            (TaskKind::FlashNoFlash, Some(_)) if self.clean.is_some() => {
                return invalid(
                    "task.clean",
                    "flash/no-flash takes pre-captured images via task.input",
                )
            }
            (TaskKind::FlashNoFlash, Some(_)) => {}
            (_, Some(_)) => {
                return invalid("task.flash", "only flash/no-flash takes a flash image")
            }
            _ => {}
        }
        let implied = match self.degradation {
            Some(Degradation::Downsample { factor }) => Some(factor),
            _ => None,
        };
        self.scale = Some(match (kind, self.scale, implied) {
            (TaskKind::SuperResolve, Some(s), Some(f)) if s != f => {
                return invalid(
                    "task.scale",
                    format!("{s} disagrees with the degradation factor {f}"),
                )
            }
            (TaskKind::SuperResolve, _, Some(f)) => f,
            (TaskKind::SuperResolve, Some(s), None) => s,
            (TaskKind::SuperResolve, None, None) => {
                return invalid("task.scale", "super-resolution needs a scale")
            }
            (_, Some(s), _) if s != 1 => {
                return invalid("task.scale", "only super-resolution rescales")
            }
            _ => 1,
        });
        if self.lambda.is_none() {
            self.lambda = Some(vec![1.0; kind.weight_count()]);
        }
        Ok(self)
    }

    /// Reads the images and applies the degradation. Expects a resolved
    /// config.
    pub fn build(&self) -> Result<TaskSpec> {
        let read = |key: &str, p: &Path| read_png(p).map_err(|e| HarnessError::file(key, p, e));
        let reference = match &self.reference {
            Some(p) => Some(read("task.reference", p)?),
            None => None,
        };
        let (corrupted, synth_mask) = match (&self.input, &self.clean) {
            (Some(p), _) => (read("task.input", p)?, None),
            (None, Some(p)) => {
                let clean = read("task.clean", p)?;
                match &self.degradation {
                    Some(d) => d.apply(&clean)?,
                    None => (clean, None),
                }
            }
            (None, None) => {
                return invalid("task.input", "one of task.input or task.clean is required")
            }
        };
        let mask = match (&self.mask, synth_mask) {
            (Some(p), _) => {
                Some(read_mask_png(p).map_err(|e| HarnessError::file("task.mask", p, e))?)
            }
            (None, m) => m,
        };
        let corrupted = match (&mask, &self.clean) {
            (Some(m), Some(_)) if self.degradation.is_none() => {
                degrade_mask_region(&corrupted, m)?.0
            }
            _ => corrupted,
        };
        let mut task = match self.kind {
            TaskKind::Denoise => TaskSpec::denoise(corrupted),
            TaskKind::SuperResolve => TaskSpec::super_resolve(corrupted, self.scale.unwrap_or(0)),
            TaskKind::Inpaint => match mask {
                Some(m) => TaskSpec::inpaint(corrupted, m),
                None => return invalid("task.mask", "inpainting needs a mask"),
            },
            TaskKind::FlashNoFlash => match &self.flash {
                Some(p) => TaskSpec::flash_no_flash(read("task.flash", p)?, corrupted),
                None => return invalid("task.flash", "flash/no-flash needs a flash image"),
            },
        };
        if let Some(r) = reference {
            task = task.with_reference(r);
        }
        if let Some(l) = &self.lambda {
            task = task.with_lambda(l);
        }
        task.validate().map_err(HarnessError::from_task)?;
        Ok(task)
    }
}

/// A `restore` experiment as written by the user.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: MedSpec,
    pub task: TaskConfig,
    /// Any subset of [`FitConfig`] keys; the rest come from
    /// [`FitConfig::for_task`].
    #[serde(default)]
    pub fit: Option<Value>,
    pub output_dir: PathBuf,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Fully resolved experiment; this is what run.json records and it
/// parses back as an [`ExperimentConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedExperiment {
    pub network: MedSpec,
    pub task: TaskConfig,
    pub fit: FitConfig,
    pub output_dir: PathBuf,
}

/// Overlays a partial fit object on the task defaults.
pub fn resolve_fit(
    kind: TaskKind,
    partial: Option<&Value>,
    seed: Option<u64>,
) -> Result<FitConfig> {
    let defaults = FitConfig::for_task(kind);
    let mut merged = serde_json::to_value(&defaults).expect("FitConfig serializes");
    if let Some(p) = partial {
        let Value::Object(user) = p else {
            return invalid("fit", "must be an object");
        };
        let slots = merged
            .as_object_mut()
            .expect("struct serializes to an object");
        for (k, v) in user {
            match slots.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return invalid(&format!("fit.{k}"), "unknown key"),
            }
        }
    }
    let mut fit: FitConfig = serde_json::from_value(merged).map_err(|e| HarnessError::Invalid {
        key: "fit".into(),
        reason: e.to_string(),
    })?;
    if let Some(s) = seed {
        fit.seed = s;
    }
    fit.validate().map_err(HarnessError::from_fit)?;
    Ok(fit)
}

pub(super) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let at = e.path().to_string();
        let key = if at == "." || at == "?" {
            path.display().to_string()
        } else {
            format!("{} ({})", at, path.display())
        };
        HarnessError::Invalid {
            key,
            reason: e.inner().to_string(),
        }
    })
}

/// Directory that relative paths inside `config` are resolved against.
pub(super) fn base_dir(config: &Path) -> PathBuf {
    let dir = config.parent().unwrap_or(Path::new("."));
    let dir = if dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        dir
    };
    std::path::absolute(dir).unwrap_or_else(|_| dir.to_path_buf())
}

pub(super) fn resolve_output(base: &Path, configured: &Path, overrides: &Overrides) -> PathBuf {
    match &overrides.out {
        Some(o) => std::path::absolute(o).unwrap_or_else(|_| o.clone()),
        None => base.join(configured),
    }
}

impl ResolvedExperiment {
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let raw: ExperimentConfig = read_json(path)?;
        Self::resolve(raw, &base_dir(path), overrides)
    }

    /// Resolves `raw` with relative paths taken from `base`.
    pub fn resolve(raw: ExperimentConfig, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut network = raw.network;
        if let Some(s) = overrides.seed {
            network.seed = s;
        }
        network.validate().map_err(HarnessError::from_net)?;
        let fit = resolve_fit(raw.task.kind, raw.fit.as_ref(), overrides.seed)?;
        let task = raw.task.resolve(base, fit.seed)?;
        let output_dir = resolve_output(base, &raw.output_dir, overrides);
        Ok(ResolvedExperiment {
            network,
            task,
            fit,
            output_dir,
        })
    }
}
