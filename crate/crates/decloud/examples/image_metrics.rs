//! The quality metrics on their own: PSNR, SSIM, Gram style loss, and the
//! perceptual pattern distance, shown on a clean/cloudy pair.

use decloud::metrics::{perceptual_distance, psnr, ssim, style_loss, StyleFeatureExtractor};
use decloud::diffusion::DEFAULT_STYLE_WEIGHTS;
use decloud::imagery::load_image;
use decloud::synthcloud::gen_corpus;
use decloud::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decloud-example-metrics");
    let manifest = gen_corpus(6, 10, 32, 0.5, &dir, true)?;
    let extractor = StyleFeatureExtractor::new();

    println!("{:<10} {:>6} {:>7} {:>7} {:>10} {:>8}", "pair", "type", "psnr", "ssim", "style", "pd");
    for e in manifest.entries.iter().take(6) {
        let clean = load_image(manifest.clean_path(e))?;
        let cloudy = load_image(manifest.cloudy_path(e))?;
        println!(
            "{:<10} {:>6} {:>7.2} {:>7.3} {:>10.4} {:>8.4}",
            e.id,
            format!("{:?}", e.cloud_type),
            psnr(&cloudy, &clean)?,
            ssim(&cloudy, &clean)?,
            style_loss(&cloudy, &clean, &extractor, &DEFAULT_STYLE_WEIGHTS)?,
            perceptual_distance(&cloudy, &clean, &extractor)?,
        );
    }

    // identity sanity: identical inputs give the metric fixed points
    let e = &manifest.entries[0];
    let clean = load_image(manifest.clean_path(e))?;
    println!(
        "self-comparison: psnr {} dB, ssim {:.1}, pd {:.1}",
        psnr(&clean, &clean)?,
        ssim(&clean, &clean)?,
        perceptual_distance(&clean, &clean, &extractor)?
    );
    Ok(())
}
