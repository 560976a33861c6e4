//! Train a small model end to end on a tiny corpus and save a checkpoint.
//! Runs in well under a minute; the point is the moving parts, not quality.

use decloud::diffusion::{train, TrainConfig, TrainEnable};
use decloud::grouping::{group_corpus, make_stage_plan};
use decloud::net::{UNet, UNetConfig};
use decloud::synthcloud::gen_corpus;
use decloud::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decloud-example-train");
    let mut manifest = gen_corpus(2, 12, 16, 0.5, &dir, true)?;

    // 2 difficulty groups, 4 total epochs split across the two stages
    group_corpus(&mut manifest, 2, 0, 1.0, 1.0)?;
    let mut sizes = vec![0usize; 2];
    for e in manifest.train() {
        sizes[e.group.unwrap() - 1] += 1;
    }
    let plan = make_stage_plan(&sizes, 4)?;

    let mut net = UNet::new(UNetConfig::default())?;
    let cfg = TrainConfig { epochs: 4, steps: 20, lr: 1e-3, seed: 0, ..Default::default() };
    let loss_csv = dir.join("loss.csv");
    let rows = train(&mut net, &manifest, &cfg, &plan, &TrainEnable::default(), Some(&loss_csv))?;

    println!("{} optimizer steps over {} stages", rows.len(), plan.stages.len());
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    println!("loss: {:.4} (step 1) -> {:.4} (step {})", first.loss, last.loss, last.step);

    let ckpt = dir.join("checkpoint.dc4c");
    net.save(&ckpt)?;
    println!("checkpoint: {} ({} bytes)", ckpt.display(), std::fs::metadata(&ckpt).unwrap().len());
    println!("loss history: {}", loss_csv.display());
    Ok(())
}
