//! Blind denoising of a 64x64 photo with a single depth-4 encoder-decoder.
//!
//! cargo run --release --example denoise -- [iterations] [sigma]

use med::fit::{fit, FitConfig};
use med::image::{psnr, read_png, ssim, write_png};
use med::net::{MedSpec, SkipMode};
use med::rng::{Rng, Stream};
use med::tasks::{degrade_noise, TaskKind, TaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(Ok(1000), |s| s.parse())?;
    let sigma: f64 = args.next().map_or(Ok(50.0), |s| s.parse())?;

    let clean = read_png(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/assets/astronaut64.png"
    ))?;
    let noisy = degrade_noise(&clean, sigma, &mut Rng::stream(0, Stream::Degradation));
    println!("noisy input: {:.2} dB", psnr(&noisy, &clean)?);

    // A narrow network keeps a 64x64 fit in the regime where structure is
    // learned well before the noise.
    let spec = MedSpec::ed(4, SkipMode::IntraSkip).with_base_channels(4);
    let task = TaskSpec::denoise(noisy.clone()).with_reference(clean.clone());
    let config = FitConfig::for_task(TaskKind::Denoise)
        .with_iterations(iterations)
        .with_trace_every(100);
    let run = fit(&spec, &task, &config)?;

    for row in &run.trace {
        println!(
            "iter {:>5}  loss {:.5}  psnr {:.2}",
            row.iteration,
            row.loss,
            row.psnr.unwrap_or(f64::NAN)
        );
    }
    let best = run.best_row().expect("reference given");
    println!(
        "{} ({} parameters): final {:.2} dB / SSIM {:.3}, best {:.2} dB at {}, {:.1}s",
        spec.variant_name(),
        run.parameter_count,
        psnr(&run.restored, &clean)?,
        ssim(&run.restored, &clean)?,
        best.psnr.unwrap_or(f64::NAN),
        best.iteration,
        run.elapsed.as_secs_f64()
    );

    let out = std::env::temp_dir().join("med-examples/denoise");
    std::fs::create_dir_all(&out)?;
    write_png(&noisy, out.join("noisy.png"))?;
    write_png(&run.restored, out.join("restored.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
