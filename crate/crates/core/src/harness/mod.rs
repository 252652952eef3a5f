//! File-level front end: JSON experiment configs, degradation, ablation
//! plans and the gradient check, each writing into one output directory.
//!
//! Exit codes: 1 for invalid input, 2 for a numerical abort (NaN or
//! divergence), 3 for a failed gradient check.

mod ablate;
mod config;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::fit::{fit, FitError, RestorationRun};
use crate::gradcheck::{self, GradReport, GradcheckError, GradcheckOptions};
use crate::image::{write_mask_png, write_png, ImageBuffer, ImageError};
use crate::net::NetError;
use crate::tasks::{TaskError, TaskKind};

pub use ablate::{
    check_axis, cmd_ablate, curves_csv, run_plan, summary_csv, AblationOutcome, AblationPlan, Axis,
    ResolvedPlan, VariantOutcome, SUMMARY_HEADER,
};
pub use config::{
    resolve_fit, Degradation, ExperimentConfig, Overrides, ResolvedExperiment, TaskConfig,
};

/// Environment variable holding the default ablation worker count.
pub const WORKERS_ENV: &str = "MED_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{key} ({}): {source}", path.display())]
    File {
        key: String,
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("numerical abort: {0}")]
    Numerical(FitError),
    #[error(transparent)]
    Fit(FitError),
    #[error(transparent)]
    Gradcheck(#[from] GradcheckError),
    #[error("gradient check failed for {}", .0.join(", "))]
    GradientMismatch(Vec<String>),
    #[error("{failed} of {total} variants failed")]
    VariantsFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn invalid<T>(key: &str, reason: impl Into<String>) -> Result<T> {
    Err(HarnessError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    })
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical(_) | HarnessError::VariantsFailed { .. } => 2,
            HarnessError::GradientMismatch(_) => 3,
            _ => 1,
        }
    }

    fn file(key: &str, path: &Path, source: ImageError) -> Self {
        HarnessError::File {
            key: key.to_string(),
            path: path.to_path_buf(),
            source,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn from_net(e: NetError) -> Self {
        match e {
            NetError::InvalidSpec { field, reason } => HarnessError::Invalid {
                key: format!("network.{field}"),
                reason,
            },
            other => HarnessError::Fit(other.into()),
        }
    }

    fn from_task(e: TaskError) -> Self {
        match e {
            TaskError::Invalid { field, reason } => HarnessError::Invalid {
                key: format!("task.{field}"),
                reason,
            },
            TaskError::Image(e) => HarnessError::Image(e),
            other => HarnessError::Fit(other.into()),
        }
    }

    /// Prefixes config errors with the section they came from.
    fn from_fit(e: FitError) -> Self {
        match e {
            e if e.is_numerical() => HarnessError::Numerical(e),
            FitError::Config { field, reason } => HarnessError::Invalid {
                key: format!("fit.{field}"),
                reason,
            },
            FitError::Net(e) => Self::from_net(e),
            FitError::Task(e) => Self::from_task(e),
            other => HarnessError::Fit(other),
        }
    }
}

/// Summary numbers written to run.json.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub variant: String,
    pub parameter_count: usize,
    pub selected_iteration: usize,
    pub final_loss: f64,
    pub final_psnr: Option<f64>,
    pub final_ssim: Option<f64>,
    pub best_psnr: Option<f64>,
    pub best_iteration: Option<usize>,
    pub wall_time_s: f64,
}

impl RunMetrics {
    pub fn of(run: &RestorationRun) -> Self {
        let last = run.final_row();
        let best = run.best_row();
        RunMetrics {
            variant: run.spec.variant_name(),
            parameter_count: run.parameter_count,
            selected_iteration: run.selected_iteration,
            final_loss: last.loss,
            final_psnr: last.psnr,
            final_ssim: last.ssim,
            best_psnr: best.and_then(|r| r.psnr),
            best_iteration: best.map(|r| r.iteration),
            wall_time_s: run.elapsed.as_secs_f64(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_png(img, path).map_err(|e| HarnessError::file("output", path, e))
}

/// Writes restored.png, trace.csv and run.json into `dir`.
pub fn write_run(
    dir: &Path,
    run: &RestorationRun,
    config: &ResolvedExperiment,
) -> Result<RunMetrics> {
    create_dir(dir)?;
    write_image(&dir.join("restored.png"), &run.restored)?;
    write_text(&dir.join("trace.csv"), &run.trace_csv())?;
    let metrics = RunMetrics::of(run);
    let doc = json!({
        "config": config,
        "metrics": metrics,
        "padding": {
            "width": run.geometry.width,
            "height": run.geometry.height,
            "padded_width": run.geometry.padded_width,
            "padded_height": run.geometry.padded_height,
        },
        "version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&doc).expect("run record serializes") + "\n";
    write_text(&dir.join("run.json"), &text)?;
    Ok(metrics)
}

/// Outcome of [`cmd_restore`].
#[derive(Clone, Debug)]
pub struct RestoreOutcome {
    pub config: ResolvedExperiment,
    pub run: RestorationRun,
    pub metrics: RunMetrics,
}

/// Runs one resolved experiment and writes its outputs, only once the fit
/// has succeeded.
pub fn run_experiment(config: ResolvedExperiment) -> Result<RestoreOutcome> {
    let task = config.task.build()?;
    log::info!(
        "restoring {} with {} for {} iterations",
        config.task.kind.key(),
        config.network.variant_name(),
        config.fit.iterations
    );
    let run = fit(&config.network, &task, &config.fit).map_err(HarnessError::from_fit)?;
    let metrics = write_run(&config.output_dir, &run, &config)?;
    Ok(RestoreOutcome {
        config,
        run,
        metrics,
    })
}

/// `restore --config <path>`.
pub fn cmd_restore(config_path: impl AsRef<Path>, overrides: &Overrides) -> Result<RestoreOutcome> {
    run_experiment(ResolvedExperiment::load(config_path, overrides)?)
}

/// A `degrade` invocation.
#[derive(Clone, Debug)]
pub struct DegradeRequest {
    pub input: PathBuf,
    pub kind: TaskKind,
    pub degradation: Degradation,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DegradeOutcome {
    pub corrupted: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Writes corrupted.png (plus mask.png for inpainting) and degrade.json.
pub fn cmd_degrade(req: &DegradeRequest) -> Result<DegradeOutcome> {
    let degradation = req.degradation.clone().with_default_seed(req.seed);
    degradation.validate("degradation")?;
    if degradation.kind() != req.kind {
        return invalid(
            "kind",
            format!(
                "a {} degradation cannot feed a {} task",
                degradation.kind().key(),
                req.kind.key()
            ),
        );
    }
    let clean = crate::image::read_png(&req.input)
        .map_err(|e| HarnessError::file("input", &req.input, e))?;
    let (corrupted, mask) = degradation.apply(&clean)?;
    create_dir(&req.out)?;
    let corrupted_path = req.out.join("corrupted.png");
    write_image(&corrupted_path, &corrupted)?;
    let mask_path = match &mask {
        Some(m) => {
            let p = req.out.join("mask.png");
            write_mask_png(m, &p).map_err(|e| HarnessError::file("output", &p, e))?;
            Some(p)
        }
        None => None,
    };
    let input = std::path::absolute(&req.input).unwrap_or_else(|_| req.input.clone());
    let doc = json!({ "input": input, "kind": req.kind, "degradation": degradation });
    write_text(
        &req.out.join("degrade.json"),
        &(serde_json::to_string_pretty(&doc).expect("serializes") + "\n"),
    )?;
    Ok(DegradeOutcome {
        corrupted: corrupted_path,
        mask: mask_path,
    })
}

/// Runs the gradient check; a report with any op over tolerance becomes
/// [`HarnessError::GradientMismatch`] after `on_report` has seen it.
pub fn cmd_gradcheck(
    opts: &GradcheckOptions,
    on_report: impl FnOnce(&GradReport),
) -> Result<GradReport> {
    let report = gradcheck::run(opts)?;
    on_report(&report);
    if !report.passed() {
        let names = report.failures().iter().map(|r| r.name.clone()).collect();
        return Err(HarnessError::GradientMismatch(names));
    }
    Ok(report)
}

/// Worker count from the flag, else [`WORKERS_ENV`], else 1.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| HarnessError::Invalid {
                key: WORKERS_ENV.into(),
                reason: format!("not a worker count: {v:?}"),
            })?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return invalid("workers", "must be >= 1");
    }
    Ok(n)
}
