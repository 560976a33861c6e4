//! Score a trained checkpoint over a manifest split: PSNR, SSIM, and the
//! Gram-matrix pattern distance per image, plus the CSV/JSON reports.

use decloud::diffusion::{evaluate, train, write_eval_reports, SampleConfig, TrainConfig, TrainEnable};
use decloud::grouping::StagePlan;
use decloud::net::{UNet, UNetConfig};
use decloud::synthcloud::{gen_corpus, Split};
use decloud::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decloud-example-eval");
    let manifest = gen_corpus(4, 15, 16, 0.5, &dir, true)?;

    let mut net = UNet::new(UNetConfig::default())?;
    let cfg = TrainConfig { epochs: 4, steps: 20, lr: 1e-3, seed: 0, ..Default::default() };
    let plan = StagePlan { stages: vec![(vec![1], cfg.epochs)] };
    train(&mut net, &manifest, &cfg, &plan, &TrainEnable::default(), None)?;

    // each test pair is sampled with its own cloud type as the prompt
    let sample = SampleConfig { steps: 20, seed: 0, ..Default::default() };
    let (rows, summary) = evaluate(&net, &manifest, Split::Test, &sample)?;

    for r in &rows {
        println!("{} [{:?}] psnr {:.2}  ssim {:.3}  pd {:.4}", r.id, r.cloud_type, r.psnr, r.ssim, r.pd);
    }
    println!(
        "means over {} pairs: psnr {:.2}  ssim {:.3}  pd {:.4}",
        summary.n, summary.psnr_mean, summary.ssim_mean, summary.pd_mean
    );

    let (csv, json) = (dir.join("eval.csv"), dir.join("eval.json"));
    write_eval_reports(&rows, &summary, &csv, &json)?;
    println!("reports: {} and {}", csv.display(), json.display());
    Ok(())
}
