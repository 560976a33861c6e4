//! Low-rank adapters: frozen base weight plus trainable (A, B) with
//! scaling alpha/r.
//!
//! The effective weight is `base + (alpha/r) * A * B`. A is Gaussian-seeded,
//! B starts at zero so a fresh adapter is an exact no-op. `alpha` may be
//! rescaled after training for inference-time sweeps without touching A or B.
//! Convolution kernels are adapted by flattening `[F,C,k,k]` to
//! `(F, C*k*k)` matrices.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Trainable low-rank delta attached to one `(m, n)` base weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub base_shape: (usize, usize),
    /// `[m, r]`, Gaussian init.
    pub a: Tensor,
    /// `[r, n]`, zero init.
    pub b: Tensor,
    pub r: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Fresh adapter: A ~ N(0, 0.02^2) from `seed`, B = 0, so the initial
    /// delta is exactly zero.
    pub fn new(base_shape: (usize, usize), r: usize, alpha: f64, seed: u64) -> Result<Self> {
        let (m, n) = base_shape;
        if r == 0 || r > m.min(n) {
            return Err(Error::domain(format!(
                "rank {r} outside 1..=min({m},{n})"
            )));
        }
        if alpha < 0.0 {
            return Err(Error::domain(format!("alpha {alpha} must be >= 0")));
        }
        Ok(LoraAdapter {
            base_shape,
            a: Tensor::randn(&[m, r], INIT_STD, seed).with_grad(),
            b: Tensor::zeros(&[r, n]).with_grad(),
            r,
            alpha,
        })
    }

    /// Inference-time rescaling of a trained adapter.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if alpha < 0.0 {
            return Err(Error::domain(format!("alpha {alpha} must be >= 0")));
        }
        self.alpha = alpha;
        Ok(())
    }

    fn check_base(&self, base: &Tensor) -> Result<()> {
        let (m, n) = self.base_shape;
        if base.numel() != m * n {
            return Err(Error::shape(format!(
                "base weight has {} elements, adapter expects {}x{}",
                base.numel(),
                m,
                n
            )));
        }
        Ok(())
    }

    /// `delta = (alpha/r) * A * B`, flat `m*n` buffer.
    pub fn delta(&self) -> Vec<f64> {
        let (m, n) = self.base_shape;
        let r = self.r;
        let scale = self.alpha / r as f64;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..r {
                let av = self.a.data[i * r + p] * scale;
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * self.b.data[p * n + j];
                }
            }
        }
        out
    }

    /// `base + (alpha/r) * A * B`, keeping the base tensor's shape.
    pub fn effective_weight(&self, base: &Tensor) -> Result<Tensor> {
        self.check_base(base)?;
        let delta = self.delta();
        let data = base.data.iter().zip(&delta).map(|(b, d)| b + d).collect();
        Tensor::new(base.shape.clone(), data)
    }

    /// Folds the delta into a standalone weight for adapter-free inference.
    pub fn merge(&self, base: &Tensor) -> Result<Tensor> {
        self.effective_weight(base)
    }

    /// Subtracts the delta back out; `unmerge(merge(w)) == w` to 1e-12.
    pub fn unmerge(&self, merged: &Tensor) -> Result<Tensor> {
        self.check_base(merged)?;
        let delta = self.delta();
        let data = merged.data.iter().zip(&delta).map(|(b, d)| b - d).collect();
        Tensor::new(merged.shape.clone(), data)
    }
}

/// Tape route: effective weight from base/A/B vars. Gradient flows only
/// through `a` and `b`; callers pass the base as a constant or frozen param.
/// The result is reshaped to `out_shape` (the base kernel layout).
pub fn effective_weight_var(
    tape: &mut Tape,
    base: Var,
    a: Var,
    b: Var,
    alpha: f64,
    r: usize,
    out_shape: &[usize],
) -> Result<Var> {
    let ab = tape.matmul(a, b)?;
    let delta = tape.scale(ab, alpha / r as f64)?;
    let base_flat = tape.reshape(base, tape.shape(delta).to_vec().as_slice())?;
    let eff = tape.add(base_flat, delta)?;
    tape.reshape(eff, out_shape)
}
