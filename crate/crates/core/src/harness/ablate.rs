use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{base_dir, read_json, resolve_output};
use super::{
    create_dir, invalid, resolve_fit, write_run, write_text, HarnessError, Overrides,
    ResolvedExperiment, Result, RunMetrics, TaskConfig,
};
use crate::fit::{fit, format_g6, FitConfig, TraceRow};
use crate::net::{MedSpec, SkipMode};
use crate::tasks::TaskSpec;

pub const SUMMARY_HEADER: &str =
    "name,final_psnr,best_psnr,best_iteration,ssim,parameter_count,wall_time_s,status";

/// The one structural property an ablation varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Generator and enhancer depths, including single-block baselines.
    Depth,
    Skip,
    Cascade,
    /// Number and depths of enhancers.
    Composition,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub axis: Axis,
    pub task: TaskConfig,
    #[serde(default)]
    pub fit: Option<Value>,
    pub variants: Vec<MedSpec>,
    pub output_dir: PathBuf,
}

/// Resolved plan as written to plan.json.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedPlan {
    pub axis: Axis,
    pub task: TaskConfig,
    pub fit: FitConfig,
    pub variants: Vec<MedSpec>,
    pub output_dir: PathBuf,
}

/// Single-block networks route no inter links, so intra and full skip
/// describe the same wiring there; the depth axis lets them pair up.
fn depth_skip_class(s: &MedSpec) -> SkipMode {
    match s.skip {
        SkipMode::FullSkip => SkipMode::IntraSkip,
        other => other,
    }
}

/// Checks that the variants differ only along `axis`.
pub fn check_axis(axis: Axis, variants: &[MedSpec]) -> Result<()> {
    let Some(first) = variants.first() else {
        return invalid("variants", "at least one variant is required");
    };
    for (i, v) in variants.iter().enumerate().skip(1) {
        let mut fixed: Vec<(&str, bool)> = vec![
            ("base_channels", v.base_channels == first.base_channels),
            ("seed", v.seed == first.seed),
        ];
        let depths = v.generator_depth == first.generator_depth
            && v.enhancer_depths == first.enhancer_depths;
        match axis {
            Axis::Depth => {
                fixed.push(("cascade", v.cascade == first.cascade));
                fixed.push(("skip", depth_skip_class(v) == depth_skip_class(first)));
            }
            Axis::Skip => {
                fixed.push(("depths", depths));
                fixed.push(("cascade", v.cascade == first.cascade));
            }
            Axis::Cascade => {
                fixed.push(("depths", depths));
                fixed.push(("skip", v.skip == first.skip));
            }
            Axis::Composition => {
                fixed.push((
                    "generator_depth",
                    v.generator_depth == first.generator_depth,
                ));
                fixed.push(("skip", v.skip == first.skip));
                fixed.push(("cascade", v.cascade == first.cascade));
            }
        }
        if let Some((key, _)) = fixed.iter().find(|(_, same)| !same) {
            return invalid(
                &format!("variants[{i}].{key}"),
                format!("differs from variants[0] but the plan's axis is {axis:?}"),
            );
        }
    }
    Ok(())
}

impl AblationPlan {
    pub fn resolve(self, base: &Path, overrides: &Overrides) -> Result<ResolvedPlan> {
        let mut variants = self.variants;
        for (i, v) in variants.iter_mut().enumerate() {
            if let Some(s) = overrides.seed {
                v.seed = s;
            }
            v.validate().map_err(|e| match HarnessError::from_net(e) {
                HarnessError::Invalid { key, reason } => HarnessError::Invalid {
                    key: key.replacen("network", &format!("variants[{i}]"), 1),
                    reason,
                },
                other => other,
            })?;
        }
        check_axis(self.axis, &variants)?;
        let fit = resolve_fit(self.task.kind, self.fit.as_ref(), overrides.seed)?;
        let task = self.task.resolve(base, fit.seed)?;
        if task.reference.is_none() {
            return invalid(
                "task.reference",
                "an ablation compares PSNR, so it needs a reference or task.clean",
            );
        }
        Ok(ResolvedPlan {
            axis: self.axis,
            task,
            fit,
            variants,
            output_dir: resolve_output(base, &self.output_dir, overrides),
        })
    }
}

/// One summary row.
#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub result: std::result::Result<(RunMetrics, Vec<TraceRow>), String>,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub plan: ResolvedPlan,
    pub variants: Vec<VariantOutcome>,
}

impl AblationOutcome {
    pub fn failed(&self) -> usize {
        self.variants.iter().filter(|v| v.result.is_err()).count()
    }

    /// [`HarnessError::VariantsFailed`] if any variant failed.
    pub fn ensure_complete(&self) -> Result<()> {
        match self.failed() {
            0 => Ok(()),
            failed => Err(HarnessError::VariantsFailed {
                failed,
                total: self.variants.len(),
            }),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_g6(v: Option<f64>) -> String {
    v.map(format_g6).unwrap_or_default()
}

/// summary.csv: one row per variant in plan order, failures included.
pub fn summary_csv(variants: &[VariantOutcome]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for v in variants {
        let row = match &v.result {
            Ok((m, _)) => format!(
                "{},{},{},{},{},{},{},ok",
                csv_field(&v.name),
                opt_g6(m.final_psnr),
                opt_g6(m.best_psnr),
                m.best_iteration.map(|i| i.to_string()).unwrap_or_default(),
                opt_g6(m.final_ssim),
                m.parameter_count,
                format!("{:.3}", m.wall_time_s),
            ),
            Err(e) => format!(
                "{},,,,,,,{}",
                csv_field(&v.name),
                csv_field(&format!("failed: {e}"))
            ),
        };
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// Column labels: variant names, suffixed with the plan index where two
/// variants share a name.
fn curve_labels(variants: &[VariantOutcome]) -> Vec<String> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for v in variants {
        *seen.entry(&v.name).or_default() += 1;
    }
    variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if seen[v.name.as_str()] > 1 {
                format!("{}#{i}", v.name)
            } else {
                v.name.clone()
            }
        })
        .collect()
}

/// curves.csv: PSNR per traced iteration, one column per variant.
pub fn curves_csv(variants: &[VariantOutcome]) -> String {
    let labels = curve_labels(variants);
    let mut iterations: Vec<usize> = variants
        .iter()
        .filter_map(|v| v.result.as_ref().ok())
        .flat_map(|(_, t)| t.iter().map(|r| r.iteration))
        .collect();
    iterations.sort_unstable();
    iterations.dedup();
    let mut out = String::from("iteration");
    for l in &labels {
        out.push(',');
        out.push_str(&csv_field(l));
    }
    out.push('\n');
    for it in iterations {
        out.push_str(&it.to_string());
        for v in variants {
            out.push(',');
            if let Ok((_, trace)) = &v.result {
                if let Some(r) = trace.iter().find(|r| r.iteration == it) {
                    out.push_str(&opt_g6(r.psnr));
                }
            }
        }
        out.push('\n');
    }
    out
}

fn run_variant(plan: &ResolvedPlan, task: &TaskSpec, index: usize) -> VariantOutcome {
    let spec = &plan.variants[index];
    let name = spec.variant_name();
    let dir = plan.output_dir.join(format!("{index:02}_{name}"));
    log::info!("variant {index}: {name}");
    let config = ResolvedExperiment {
        network: spec.clone(),
        task: plan.task.clone(),
        fit: plan.fit.clone(),
        output_dir: dir.clone(),
    };
    let result = fit(spec, task, &plan.fit)
        .map_err(|e| HarnessError::from_fit(e).to_string())
        .and_then(|run| {
            write_run(&dir, &run, &config)
                .map(|m| (m, run.trace.clone()))
                .map_err(|e| e.to_string())
        });
    if let Err(e) = &result {
        log::warn!("variant {index} ({name}) failed: {e}");
    }
    VariantOutcome { name, dir, result }
}

/// Runs every variant of a resolved plan on up to `workers` threads and
/// writes plan.json, the per-variant directories, summary.csv and
/// curves.csv.
pub fn run_plan(plan: ResolvedPlan, workers: usize) -> Result<AblationOutcome> {
    let task = plan.task.build()?;
    create_dir(&plan.output_dir)?;
    write_text(
        &plan.output_dir.join("plan.json"),
        &(serde_json::to_string_pretty(&plan).expect("plan serializes") + "\n"),
    )?;
    let n = plan.variants.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<VariantOutcome>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let outcome = run_variant(&plan, &task, i);
                slots.lock().expect("no worker panicked")[i] = Some(outcome);
            });
        }
    });
    let variants: Vec<VariantOutcome> = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|v| v.expect("every variant ran"))
        .collect();
    write_text(
        &plan.output_dir.join("summary.csv"),
        &summary_csv(&variants),
    )?;
    write_text(&plan.output_dir.join("curves.csv"), &curves_csv(&variants))?;
    Ok(AblationOutcome { plan, variants })
}

/// `ablate --plan <path>`. Failed variants are recorded in the summary
/// rather than returned; see [`AblationOutcome::ensure_complete`].
pub fn cmd_ablate(
    plan_path: impl AsRef<Path>,
    overrides: &Overrides,
    workers: usize,
) -> Result<AblationOutcome> {
    let path = plan_path.as_ref();
    let raw: AblationPlan = read_json(path)?;
    run_plan(raw.resolve(&base_dir(path), overrides)?, workers)
}
