//! Low-rank adapter algebra: zero delta at init, the alpha/r scaling, and
//! merge/unmerge round-tripping.

use decloud::lora::LoraAdapter;
use decloud::tensor::Tensor;
use decloud::Result;

fn main() -> Result<()> {
    let base = Tensor::randn(&[4, 6], 1.0, 0);
    let mut ad = LoraAdapter::new((4, 6), 2, 2.0, 1)?;

    // B starts at zero, so the adapted layer is exactly the base layer
    let eff = ad.effective_weight(&base)?;
    assert_eq!(eff.data, base.data);
    println!("fresh adapter: effective weight == base (delta is exactly 0)");

    // give B some content; delta = (alpha/r) * A * B
    for (i, v) in ad.b.data.iter_mut().enumerate() {
        *v = 0.1 * (i as f64 + 1.0);
    }
    let delta = ad.delta();
    let max = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    println!("after editing B: max |delta| = {max:.4} at alpha = {}", ad.alpha);

    // alpha rescales the delta linearly without touching A or B
    ad.set_alpha(1.0)?;
    let half = ad.delta();
    assert!(delta.iter().zip(&half).all(|(d, h)| (d - 2.0 * h).abs() < 1e-12));
    println!("alpha 2.0 -> 1.0 halves the delta exactly");

    // merge bakes the delta into the weight; unmerge recovers the base
    let merged = ad.merge(&base)?;
    let back = ad.unmerge(&merged)?;
    let err = base.data.iter().zip(&back.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("merge -> unmerge round-trip error: {err:.2e}");
    assert!(err < 1e-12);
    Ok(())
}
