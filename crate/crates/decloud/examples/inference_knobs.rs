//! What the inference-time knobs do on one trained model: adapter scaling
//! alpha, guidance scale, control strength, and the FreeU parameters.

use decloud::diffusion::{remove_clouds, train, SampleConfig, TrainConfig, TrainEnable};
use decloud::grouping::StagePlan;
use decloud::imagery::load_image;
use decloud::metrics::psnr;
use decloud::net::{FreeUParams, UNet, UNetConfig};
use decloud::synthcloud::{gen_corpus, Split};
use decloud::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decloud-example-knobs");
    let manifest = gen_corpus(5, 15, 16, 1.0, &dir, true)?;

    let mut net = UNet::new(UNetConfig::default())?;
    let cfg = TrainConfig { epochs: 6, steps: 20, lr: 1e-3, seed: 0, ..Default::default() };
    let plan = StagePlan { stages: vec![(vec![1], cfg.epochs)] };
    train(&mut net, &manifest, &cfg, &plan, &TrainEnable::default(), None)?;

    let pair = manifest.entries.iter().find(|e| e.split == Split::Test).unwrap();
    let clean = load_image(manifest.clean_path(pair))?;
    let cloudy = load_image(manifest.cloudy_path(pair))?;
    let base = SampleConfig { steps: 20, seed: 0, ..Default::default() };

    let show = |label: &str, cfg: &SampleConfig| -> Result<()> {
        let out = remove_clouds(&net, &cloudy, cfg)?;
        println!("  {label:<26} psnr {:.2} dB", psnr(&out, &clean)?);
        Ok(())
    };

    println!("adapter scaling (alpha 0 disables the learned deltas):");
    for alpha in [0.0, 0.3, 0.7, 1.0] {
        show(&format!("alpha = {alpha}"), &SampleConfig { alpha, ..base.clone() })?;
    }
    println!("guidance scale (1 = no guidance):");
    for scale in [1.0, 4.0, 8.0] {
        show(&format!("scale = {scale}"), &SampleConfig { scale, ..base.clone() })?;
    }
    println!("control strength (0 ignores the cloudy image entirely):");
    for strength in [0.0, 1.0, 1.1] {
        show(&format!("strength = {strength}"), &SampleConfig { strength, ..base.clone() })?;
    }
    println!("freeu:");
    show("identity", &SampleConfig { freeu: FreeUParams::identity(), ..base.clone() })?;
    show("tuned (0.9,0.4,1.1,1.1)", &SampleConfig { freeu: FreeUParams::tuned(), ..base.clone() })?;
    Ok(())
}
