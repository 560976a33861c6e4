//! The full inference path: train briefly, then run the guided reverse
//! chain on a held-out cloudy image and compare against its clean pair.

use decloud::diffusion::{remove_clouds, train, SampleConfig, TrainConfig, TrainEnable};
use decloud::grouping::StagePlan;
use decloud::imagery::{load_image, save_image};
use decloud::metrics::psnr;
use decloud::net::{PromptCondition, UNet, UNetConfig};
use decloud::synthcloud::{gen_corpus, Split};
use decloud::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decloud-example-remove");
    let manifest = gen_corpus(3, 20, 16, 1.0, &dir, true)?; // all thin

    let mut net = UNet::new(UNetConfig::default())?;
    let cfg = TrainConfig { epochs: 6, steps: 20, lr: 1e-3, seed: 0, ..Default::default() };
    let plan = StagePlan { stages: vec![(vec![1], cfg.epochs)] }; // ungrouped
    train(&mut net, &manifest, &cfg, &plan, &TrainEnable::default(), None)?;

    let pair = manifest.entries.iter().find(|e| e.split == Split::Test).unwrap();
    let clean = load_image(manifest.clean_path(pair))?;
    let cloudy = load_image(manifest.cloudy_path(pair))?;

    let sample = SampleConfig { prompt: PromptCondition::Thin, steps: 20, seed: 1, ..Default::default() };
    let output = remove_clouds(&net, &cloudy, &sample)?;

    println!("test pair {}:", pair.id);
    println!("  psnr(cloudy, clean) = {:.2} dB", psnr(&cloudy, &clean)?);
    println!("  psnr(output, clean) = {:.2} dB", psnr(&output, &clean)?);

    let out = dir.join("restored.png");
    save_image(&output, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
