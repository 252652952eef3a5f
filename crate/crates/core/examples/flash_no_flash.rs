//! Flash/no-flash fusion on a synthetic pair: a dim, noisy ambient shot
//! and a bright flash shot with a cold colour cast.
//!
//! cargo run --release --example flash_no_flash -- [iterations] [lambda1] [lambda2]

use med::fit::{fit, FitConfig};
use med::image::{psnr, read_png, write_png, ImageBuffer};
use med::net::{MedSpec, SkipMode};
use med::rng::{Rng, Stream};
use med::tasks::{noise_field, TaskKind, TaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(Ok(800), |s| s.parse())?;
    let l1: f64 = args.next().map_or(Ok(1.0), |s| s.parse())?;
    let l2: f64 = args.next().map_or(Ok(0.3), |s| s.parse())?;

    let scene = read_png(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/chelsea64.png"))?;
    let (w, h) = scene.dims();
    let noise = noise_field(w, h, 25.0, &mut Rng::stream(0, Stream::Degradation));
    let plane = w * h;
    let no_flash = ImageBuffer::from_fn(w, h, |c, y, x| {
        (0.6 * scene.get(c, y, x) + noise[c * plane + y * w + x]).clamp(0.0, 1.0)
    });
    let cast = [0.85, 0.95, 1.15];
    let flash = ImageBuffer::from_fn(w, h, |c, y, x| {
        (cast[c] * scene.get(c, y, x)).clamp(0.0, 1.0)
    });

    // λ1 weighs the ambient pyramid, λ2 pulls the output towards the flash
    // shot's detail.
    let spec = MedSpec::med(5, &[4, 3], SkipMode::IntraSkip, false).with_base_channels(4);
    let task = TaskSpec::flash_no_flash(flash.clone(), no_flash.clone()).with_lambda(&[l1, l2]);
    let config = FitConfig::for_task(TaskKind::FlashNoFlash).with_iterations(iterations);
    let run = fit(&spec, &task, &config)?;
    println!(
        "lambda ({l1}, {l2}): no-flash {:.2} dB, flash {:.2} dB, fused {:.2} dB vs the scene",
        psnr(&no_flash, &scene)?,
        psnr(&flash, &scene)?,
        psnr(&run.restored, &scene)?
    );

    let out = std::env::temp_dir().join("med-examples/flash_no_flash");
    std::fs::create_dir_all(&out)?;
    write_png(&no_flash, out.join("no_flash.png"))?;
    write_png(&flash, out.join("flash.png"))?;
    write_png(&run.restored, out.join("fused.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
