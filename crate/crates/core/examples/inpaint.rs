//! Inpainting: half the pixels dropped at random, then a square hole.
//!
//! cargo run --release --example inpaint -- [iterations]

use med::fit::{fit, FitConfig};
use med::image::{psnr_in_region, read_png, write_mask_png, write_png, ImageBuffer, Mask};
use med::net::{MedSpec, SkipMode};
use med::rng::{Rng, Stream};
use med::tasks::{degrade_mask_random, degrade_mask_region, TaskKind, TaskSpec};

/// Holes filled with mid gray, the reference point for hole PSNR.
fn gray_fill(img: &ImageBuffer, mask: &Mask) -> ImageBuffer {
    ImageBuffer::from_fn(img.width(), img.height(), |c, y, x| {
        if mask.is_kept(y, x) {
            img.get(c, y, x)
        } else {
            0.5
        }
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: usize = std::env::args().nth(1).map_or(Ok(1500), |s| s.parse())?;
    let clean = read_png(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/assets/astronaut64.png"
    ))?;
    let out = std::env::temp_dir().join("med-examples/inpaint");
    std::fs::create_dir_all(&out)?;

    let random = degrade_mask_random(&clean, 0.5, &mut Rng::stream(0, Stream::Degradation));
    let square = degrade_mask_region(&clean, &Mask::with_rect_hole(64, 64, 24, 24, 16, 16))?;
    for (name, (corrupted, mask)) in [("random", random), ("square", square)] {
        // No skip links: they pass the holes' zeros straight to the output.
        let spec = MedSpec::med(5, &[4, 3], SkipMode::NoSkip, false).with_base_channels(4);
        let task = TaskSpec::inpaint(corrupted.clone(), mask.clone()).with_reference(clean.clone());
        let config = FitConfig::for_task(TaskKind::Inpaint).with_iterations(iterations);
        let run = fit(&spec, &task, &config)?;
        let holes = mask.inverted();
        println!(
            "{name}: {} holes, gray fill {:.2} dB, {} {:.2} dB over the holes ({:.1}s)",
            mask.hole_count(),
            psnr_in_region(&gray_fill(&corrupted, &mask), &clean, &holes)?,
            spec.variant_name(),
            psnr_in_region(&run.restored, &clean, &holes)?,
            run.elapsed.as_secs_f64()
        );
        write_png(&corrupted, out.join(format!("{name}_corrupted.png")))?;
        write_mask_png(&mask, out.join(format!("{name}_mask.png")))?;
        write_png(&run.restored, out.join(format!("{name}_restored.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
