use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use med::autodiff::OpKind;
use med::gradcheck::GradcheckOptions;
use med::harness::{
    cmd_ablate, cmd_degrade, cmd_gradcheck, cmd_restore, resolve_workers, Degradation,
    DegradeRequest, HarnessError, Overrides,
};
use med::net::MedSpec;
use med::tasks::TaskKind;

/// Learning-free image restoration with multi-level encoder-decoder networks.
#[derive(Parser)]
#[command(name = "med", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a network to one corrupted image and write restored.png,
    /// trace.csv and run.json.
    Restore {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Corrupt a clean image and write corrupted.png (and mask.png).
    Degrade(DegradeArgs),
    /// Run every variant of an ablation plan and write summary.csv.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Parallel variants; defaults to $MED_WORKERS or 1.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check every backward rule against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory, replacing the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the network, the fit and any synthetic degradation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Denoise,
    SuperResolve,
    Inpaint,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Downsampling factor.
    #[arg(long)]
    factor: Option<usize>,
    /// Fraction of pixels to drop.
    #[arg(long)]
    drop: Option<f64>,
    /// Rectangular hole as x,y,width,height.
    #[arg(long, value_delimiter = ',')]
    region: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Image side length.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Network spec as JSON; defaults to a 3-level intra-skip network.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn degradation(a: &DegradeArgs) -> Result<(TaskKind, Degradation), HarnessError> {
    let missing = |flag: &str| HarnessError::Invalid {
        key: flag.into(),
        reason: "required for this kind".into(),
    };
    Ok(match a.kind {
        Kind::Denoise => (
            TaskKind::Denoise,
            Degradation::Noise {
                sigma: a.sigma.ok_or_else(|| missing("--sigma"))?,
                seed: None,
            },
        ),
        Kind::SuperResolve => (
            TaskKind::SuperResolve,
            Degradation::Downsample {
                factor: a.factor.ok_or_else(|| missing("--factor"))?,
            },
        ),
        Kind::Inpaint => match (&a.drop, &a.region) {
            (Some(p), None) => (
                TaskKind::Inpaint,
                Degradation::RandomDrop { p: *p, seed: None },
            ),
            (None, Some(r)) if r.len() == 4 => (
                TaskKind::Inpaint,
                Degradation::Region {
                    x: r[0],
                    y: r[1],
                    width: r[2],
                    height: r[3],
                },
            ),
            (None, Some(_)) => {
                return Err(HarnessError::Invalid {
                    key: "--region".into(),
                    reason: "expected x,y,width,height".into(),
                })
            }
            _ => {
                return Err(HarnessError::Invalid {
                    key: "--drop/--region".into(),
                    reason: "inpainting takes exactly one of them".into(),
                })
            }
        },
    })
}

fn gradcheck_options(a: &GradcheckArgs) -> Result<GradcheckOptions, HarnessError> {
    let mut opts = GradcheckOptions {
        size: a.size,
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    if let Some(json) = &a.spec {
        opts.spec = serde_json::from_str::<MedSpec>(json).map_err(|e| HarnessError::Invalid {
            key: "--spec".into(),
            reason: e.to_string(),
        })?;
    }
    if let Some(name) = &a.inject_fault {
        opts.fault = Some(
            OpKind::from_name(name).ok_or_else(|| HarnessError::Invalid {
                key: "--inject-fault".into(),
                reason: format!("unknown op {name:?}"),
            })?,
        );
    }
    Ok(opts)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Restore { config, common } => {
            let overrides = Overrides {
                out: common.out,
                seed: common.seed,
            };
            let outcome = cmd_restore(&config, &overrides)?;
            let m = &outcome.metrics;
            println!(
                "{}: {} iterations, final loss {:.6}{}",
                m.variant,
                outcome.config.fit.iterations,
                m.final_loss,
                m.final_psnr
                    .map(|p| format!(", PSNR {p:.2} dB"))
                    .unwrap_or_default()
            );
            println!("wrote {}", outcome.config.output_dir.display());
        }
        Command::Degrade(a) => {
            let (kind, degradation) = degradation(&a)?;
            let out = cmd_degrade(&DegradeRequest {
                input: a.input,
                kind,
                degradation,
                seed: a.seed,
                out: a.out,
            })?;
            println!("wrote {}", out.corrupted.display());
            if let Some(m) = out.mask {
                println!("wrote {}", m.display());
            }
        }
        Command::Ablate {
            plan,
            common,
            workers,
        } => {
            let overrides = Overrides {
                out: common.out,
                seed: common.seed,
            };
            let outcome = cmd_ablate(&plan, &overrides, resolve_workers(workers)?)?;
            print!("{}", med::harness::summary_csv(&outcome.variants));
            outcome.ensure_complete()?;
        }
        Command::Gradcheck(a) => {
            cmd_gradcheck(&gradcheck_options(&a)?, |r| print!("{}", r.render()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors share exit code 1 with invalid configs; 2 means a
    // numerical abort.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
