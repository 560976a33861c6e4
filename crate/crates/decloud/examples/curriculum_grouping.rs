//! Cluster training pairs by restoration difficulty and derive the staged
//! training plan: easy pairs first, hardest last.

use decloud::grouping::{group_corpus, make_stage_plan};
use decloud::synthcloud::gen_corpus;
use decloud::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decloud-example-grouping");
    let mut manifest = gen_corpus(1, 40, 32, 0.5, &dir, true)?;

    // difficulty score per pair: l1*MSE + l2*(1 - SSIM) against the clean
    // image, k-means in that space, clusters ordered easy -> hard
    let result = group_corpus(&mut manifest, 3, 0, 1.0, 1.0)?;
    println!("clustered into k = {} groups", result.k);

    let mut sizes = vec![0usize; result.k];
    for e in manifest.train() {
        sizes[e.group.unwrap() - 1] += 1;
    }
    for (i, n) in sizes.iter().enumerate() {
        let scores: Vec<f64> = manifest
            .train()
            .filter(|e| e.group == Some(i + 1))
            .map(|e| e.score.unwrap())
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("  group {} — {n} pairs, mean difficulty {mean:.4}", i + 1);
    }

    // epochs split proportionally to group size, one stage per group
    let plan = make_stage_plan(&sizes, 9)?;
    for (i, (groups, epochs)) in plan.stages.iter().enumerate() {
        println!("stage {}: groups {groups:?} for {epochs} epoch(s)", i + 1);
    }
    Ok(())
}
