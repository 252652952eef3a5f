//! PNG round trips and the quality metrics.
//!
//! cargo run --example image_io -- [png]

use med::image::{psnr, read_png, resize, ssim, write_png, ImageBuffer, Method, Scale};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/assets/chelsea64.png").into());
    let img = read_png(&path)?;
    println!("{path}: {}x{}", img.width(), img.height());

    let out = std::env::temp_dir().join("med-examples/image_io");
    std::fs::create_dir_all(&out)?;
    let copy = out.join("copy.png");
    write_png(&img, &copy)?;
    println!(
        "8-bit round trip identical: {}",
        read_png(&copy)?.data() == img.quantized().data()
    );

    let gray = ImageBuffer::constant(img.width(), img.height(), 0.5);
    println!(
        "vs flat gray: {:.2} dB, SSIM {:.3}",
        psnr(&img, &gray)?,
        ssim(&img, &gray)?
    );
    for method in [Method::Nearest, Method::Bilinear, Method::Bicubic] {
        let small = resize(&img, Scale::Down(2), Method::Area)?;
        let back = resize(&small, Scale::Up(2), method)?;
        println!(
            "area down, {method:?} up: {:.2} dB, SSIM {:.3}",
            psnr(&back, &img)?,
            ssim(&back, &img)?
        );
    }
    Ok(())
}
