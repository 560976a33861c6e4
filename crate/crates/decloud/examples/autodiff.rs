//! Tour of the reverse-mode tape: build a small expression, read gradients,
//! and confirm them against central finite differences.

use decloud::tensor::{grad_check, Tape, Tensor};
use decloud::Result;

fn main() -> Result<()> {
    // forward + backward on y = mean(silu(conv(x, k)) * silu(conv(x, k)))
    let x = Tensor::randn(&[1, 3, 8, 8], 1.0, 7);
    let k = Tensor::randn(&[4, 3, 3, 3], 0.5, 8);

    let mut tape = Tape::new();
    let xv = tape.leaf(&x)?;
    let kv = tape.constant(&k)?;
    let c = tape.conv2d(xv, kv, 1, 1)?;
    let s = tape.silu(c)?;
    let sq = tape.mul(s, s)?;
    let y = tape.mean(sq)?;
    println!("y = {:.6}  ({} tape nodes)", tape.value(y), tape.len());

    tape.backward(y)?;
    let g = tape.grad(xv);
    println!("dy/dx[0..4] = {:?}", &g[..4]);

    // the same expression as a closure, checked numerically
    let rel = grad_check(
        |t, xv| {
            let kv = t.constant(&k)?;
            let c = t.conv2d(xv, kv, 1, 1)?;
            let s = t.silu(c)?;
            let sq = t.mul(s, s)?;
            t.mean(sq)
        },
        &x,
        1e-4,
    )?;
    println!("max relative gradient error vs finite differences: {rel:.2e}");
    assert!(rel < 1e-6);
    Ok(())
}
