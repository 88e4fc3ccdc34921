//! Applies the robustness degradations to a synthetic photo and writes the
//! results as PNGs.
//!
//! cargo run --example degradations -- [out_dir]

use deeclip::data::{degrade_blur, degrade_jpeg};
use deeclip::eval::standard_sweep;
use deeclip::fixtures::natural_image;
use image::DynamicImage;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "degraded".into()));
    std::fs::create_dir_all(&out)?;
    let img = natural_image(256, 192, 0);
    img.save(out.join("original.png"))?;
    let mut png = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img.clone()).write_to(&mut png, image::ImageFormat::Png)?;
    let png = png.into_inner();

    for q in [80u8, 70, 60] {
        let bytes = degrade_jpeg(&png, q)?;
        let decoded = image::load_from_memory(&bytes)?.to_rgb8();
        let mse = img.as_raw().iter().zip(decoded.as_raw()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>()
            / img.as_raw().len() as f64;
        decoded.save(out.join(format!("jpeg_{q}.png")))?;
        println!("jpeg q={q}: {} bytes, MSE {mse:.2}", bytes.len());
    }
    let float = DynamicImage::ImageRgb8(img).to_rgb32f();
    for sigma in [1.0, 2.0, 3.0] {
        let blurred = degrade_blur(&float, sigma)?;
        DynamicImage::ImageRgb32F(blurred).to_rgb8().save(out.join(format!("blur_{sigma}.png")))?;
        println!("blur sigma={sigma}");
    }
    let specs: Vec<String> = standard_sweep().iter().map(|d| d.to_string()).collect();
    println!("standard sweep: {}", specs.join(" "));
    println!("wrote {}", out.display());
    Ok(())
}
