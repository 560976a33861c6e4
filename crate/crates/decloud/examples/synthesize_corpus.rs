//! Generate a paired clean/cloudy corpus and look at what came out: the
//! manifest, the split sizes, and how much damage the clouds do (PSNR).

use decloud::diffusion::cloudy_baseline_psnr;
use decloud::synthcloud::{gen_corpus, CloudType, Split};
use decloud::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("decloud-example-corpus");
    let manifest = gen_corpus(0, 40, 32, 0.5, &dir, true)?;

    let train = manifest.entries.iter().filter(|e| e.split == Split::Train).count();
    let test = manifest.entries.len() - train;
    println!("{} pairs under {} ({train} train / {test} test)", manifest.entries.len(), dir.display());

    for e in manifest.entries.iter().take(3) {
        println!(
            "  {} [{:?}/{:?}] {} + {}",
            e.id,
            e.cloud_type,
            e.split,
            e.clean.display(),
            e.cloudy.display()
        );
    }

    // thick clouds occlude more, so their baseline PSNR is lower
    for ct in [CloudType::Thin, CloudType::Thick] {
        let p = cloudy_baseline_psnr(&manifest, Split::Test, Some(ct))?;
        println!("baseline psnr(cloudy, clean), {ct:?} test pairs: {p:.2} dB");
    }
    Ok(())
}
