//! Image quality metrics and style/perceptual losses.
//!
//! PSNR and SSIM follow the usual conventions with MAX = 1 (11x11 Gaussian
//! window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, computed per channel over
//! valid windows and averaged). The perceptual distance "PD" and the Gram
//! style loss share one fixed, seeded convolutional feature stack; PD is a
//! stand-in for learned perceptual metrics and is not numerically comparable
//! to them.

use crate::error::{Error, Result};
use crate::imagery::Image;
use crate::tensor::{Tape, Tensor, Var};
use serde::Serialize;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-image quality summary.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QualityReport {
    /// Peak signal-to-noise ratio in dB, capped at 100.
    pub psnr: f64,
    /// Structural similarity in [-1, 1].
    pub ssim: f64,
    /// Fixed-feature perceptual distance, >= 0.
    pub pd: f64,
}

impl QualityReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.psnr, self.ssim, self.pd)
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::shape(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// 10 * log10(1 / MSE) with MAX = 1; identical images return the cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-d Gaussian taps for the SSIM window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian filter over valid positions of one channel plane.
fn blur_valid(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let k = SSIM_WINDOW;
    let ow = w - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * plane[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let oh = h - k + 1;
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM with a Gaussian window; per channel, then averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| a.pixels()[i * 3 + c]).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.pixels()[i * 3 + c]).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = blur_valid(&pa, w, h);
        let mu_b = blur_valid(&pb, w, h);
        let m_aa = blur_valid(&paa, w, h);
        let m_bb = blur_valid(&pbb, w, h);
        let m_ab = blur_valid(&pab, w, h);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Tape route for SSIM so it can serve as a training-loss term. `a` and `b`
/// are `[1,3,H,W]` vars in [0,1] image space; the result matches [`ssim`]
/// up to filter-order rounding (the plain route blurs separably, this one
/// convolves with the full 2-d window).
pub fn ssim_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 || tape.shape(b) != shape.as_slice() {
        return Err(Error::shape(format!(
            "ssim_var expects matching [1,3,H,W] inputs, got {:?} and {:?}",
            shape,
            tape.shape(b)
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps();
    let mut kdata = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            kdata[y * SSIM_WINDOW + x] = taps[y] * taps[x];
        }
    }
    let kernel_t = Tensor::new(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], kdata)?;
    let kernel = tape.constant(&kernel_t)?;
    let blur = |tape: &mut Tape, v: Var| tape.conv2d(v, kernel, 1, 0);
    let mut total: Option<Var> = None;
    for c in 0..3 {
        let pa = tape.channel_slice(a, c)?;
        let pb = tape.channel_slice(b, c)?;
        let paa = tape.mul(pa, pa)?;
        let pbb = tape.mul(pb, pb)?;
        let pab = tape.mul(pa, pb)?;
        let mu_a = blur(tape, pa)?;
        let mu_b = blur(tape, pb)?;
        let m_aa = blur(tape, paa)?;
        let m_bb = blur(tape, pbb)?;
        let m_ab = blur(tape, pab)?;
        let ma_mb = tape.mul(mu_a, mu_b)?;
        let ma2 = tape.mul(mu_a, mu_a)?;
        let mb2 = tape.mul(mu_b, mu_b)?;
        // variances and covariance of each window
        let va = tape.sub(m_aa, ma2)?;
        let vb = tape.sub(m_bb, mb2)?;
        let cov = tape.sub(m_ab, ma_mb)?;
        let n1 = tape.scale(ma_mb, 2.0)?;
        let n1 = tape.add_scalar(n1, SSIM_C1)?;
        let n2 = tape.scale(cov, 2.0)?;
        let n2 = tape.add_scalar(n2, SSIM_C2)?;
        let num = tape.mul(n1, n2)?;
        let d1 = tape.add(ma2, mb2)?;
        let d1 = tape.add_scalar(d1, SSIM_C1)?;
        let d2 = tape.add(va, vb)?;
        let d2 = tape.add_scalar(d2, SSIM_C2)?;
        let den = tape.mul(d1, d2)?;
        let ratio = tape.div(num, den)?;
        let mean = tape.mean(ratio)?;
        total = Some(match total {
            Some(t) => tape.add(t, mean)?,
            None => mean,
        });
    }
    tape.scale(total.expect("three channels"), 1.0 / 3.0)
}

/// G[i,j] = (1/(H*W)) * sum_p F[i,p] * F[j,p] for features `[C,H,W]`.
pub fn gram_matrix(features: &Tensor) -> Result<Tensor> {
    if features.shape.len() != 3 {
        return Err(Error::shape(format!(
            "gram_matrix expects [C,H,W], got {:?}",
            features.shape
        )));
    }
    let (c, h, w) = (features.shape[0], features.shape[1], features.shape[2]);
    let hw = h * w;
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let mut acc = 0.0;
            for p in 0..hw {
                acc += features.data[i * hw + p] * features.data[j * hw + p];
            }
            acc /= hw as f64;
            g[i * c + j] = acc;
            g[j * c + i] = acc;
        }
    }
    Tensor::new(vec![c, c], g)
}

/// Channel widths of the fixed feature stack.
pub const EXTRACTOR_CHANNELS: [usize; 4] = [3, 8, 16, 32];
pub const EXTRACTOR_SEED: u64 = 7;
pub const EXTRACTOR_DEPTH: usize = 3;

/// Frozen, seeded 3-layer convolution stack (3 -> 8 -> 16 -> 32, 3x3,
/// stride 2, silu). Backs both the Gram style loss and the perceptual
/// distance; identical weights on every run and platform.
#[derive(Debug, Clone)]
pub struct StyleFeatureExtractor {
    kernels: Vec<Tensor>,
}

impl Default for StyleFeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl StyleFeatureExtractor {
    pub fn new() -> Self {
        let mut kernels = Vec::with_capacity(EXTRACTOR_DEPTH);
        for l in 0..EXTRACTOR_DEPTH {
            let (cin, cout) = (EXTRACTOR_CHANNELS[l], EXTRACTOR_CHANNELS[l + 1]);
            // He-style scale keeps activations in a workable range over 3 layers
            let std = (2.0 / (cin * 9) as f64).sqrt();
            kernels.push(Tensor::randn(
                &[cout, cin, 3, 3],
                std,
                EXTRACTOR_SEED.wrapping_mul(1000).wrapping_add(l as u64),
            ));
        }
        StyleFeatureExtractor { kernels }
    }

    /// Tape route: feature maps at each layer for a `[1,3,H,W]` input var.
    pub fn features_var(&self, tape: &mut Tape, input: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(EXTRACTOR_DEPTH);
        let mut cur = input;
        for kernel in &self.kernels {
            let k = tape.constant(kernel)?;
            let conv = tape.conv2d(cur, k, 2, 1)?;
            cur = tape.silu(conv)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    /// Plain route: feature tensors for an image in [0,1] space.
    pub fn features(&self, img: &Image) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let input = tape.constant(&image_tensor01(img))?;
        let feats = self.features_var(&mut tape, input)?;
        Ok(feats.into_iter().map(|v| tape.tensor(v)).collect())
    }
}

/// `[1,3,H,W]` tensor of raw [0,1] pixel values.
pub fn image_tensor01(img: &Image) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = img.get(x, y, c);
            }
        }
    }
    Tensor {
        shape: vec![1, 3, h, w],
        data,
        requires_grad: false,
        grad: None,
    }
}

/// Tape route for the style loss: sum_l w_l * ||G_l(gen) - G_l(ref)||_F^2.
/// `gen` is a `[1,3,H,W]` var; `reference` is a fixed image.
pub fn style_loss_var(
    tape: &mut Tape,
    extractor: &StyleFeatureExtractor,
    gen: Var,
    reference: &Image,
    weights: &[f64],
) -> Result<Var> {
    if weights.len() != EXTRACTOR_DEPTH {
        return Err(Error::Config(format!(
            "style loss needs {EXTRACTOR_DEPTH} layer weights, got {}",
            weights.len()
        )));
    }
    let gen_feats = extractor.features_var(tape, gen)?;
    let ref_feats = extractor.features(reference)?;
    let mut total: Option<Var> = None;
    for (l, (gf, rf)) in gen_feats.iter().zip(&ref_feats).enumerate() {
        let shape = tape.shape(*gf).to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let flat = tape.reshape(*gf, &[c, h * w])?;
        let flat_t = tape.transpose2d(flat)?;
        let g_gen = tape.matmul(flat, flat_t)?;
        let g_gen = tape.scale(g_gen, 1.0 / (h * w) as f64)?;
        let rt = Tensor {
            shape: vec![rf.shape[1], rf.shape[2], rf.shape[3]],
            data: rf.data.clone(),
            requires_grad: false,
            grad: None,
        };
        let g_ref_t = gram_matrix(&rt)?;
        let g_ref = tape.constant(&g_ref_t)?;
        let diff = tape.sub(g_gen, g_ref)?;
        let sq = tape.mul(diff, diff)?;
        let fro = tape.sum(sq)?;
        let term = tape.scale(fro, weights[l])?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has at least one layer"))
}

/// Symmetric style loss on two images (plain route).
pub fn style_loss(
    gen: &Image,
    reference: &Image,
    extractor: &StyleFeatureExtractor,
    weights: &[f64],
) -> Result<f64> {
    check_dims(gen, reference)?;
    let mut tape = Tape::new();
    let g = tape.constant(&image_tensor01(gen))?;
    let loss = style_loss_var(&mut tape, extractor, g, reference, weights)?;
    Ok(tape.value(loss))
}

/// Mean over layers of the mean squared difference of channel-unit-normalized
/// features; zero iff the inputs are identical.
pub fn perceptual_distance(a: &Image, b: &Image, extractor: &StyleFeatureExtractor) -> Result<f64> {
    check_dims(a, b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    let mut total = 0.0;
    for (ta, tb) in fa.iter().zip(&fb) {
        let (c, h, w) = (ta.shape[1], ta.shape[2], ta.shape[3]);
        let hw = h * w;
        let mut layer = 0.0;
        for p in 0..hw {
            let norm = |t: &Tensor| {
                let mut s = 0.0;
                for ch in 0..c {
                    let v = t.data[ch * hw + p];
                    s += v * v;
                }
                (s.sqrt()).max(1e-10)
            };
            let (na, nb) = (norm(ta), norm(tb));
            for ch in 0..c {
                let d = ta.data[ch * hw + p] / na - tb.data[ch * hw + p] / nb;
                layer += d * d;
            }
        }
        total += layer / (c * hw) as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Eq-style sample complexity: `l1 * MSE + l2 * (1 - SSIM)`; larger means a
/// harder (more degraded) pair.
pub fn complexity_score(x: &Image, y: &Image, l1: f64, l2: f64) -> Result<f64> {
    Ok(l1 * mse(x, y)? + l2 * (1.0 - ssim(x, y)?))
}

/// Full report for one image pair.
pub fn quality_report(a: &Image, b: &Image, extractor: &StyleFeatureExtractor) -> Result<QualityReport> {
    Ok(QualityReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        pd: perceptual_distance(a, b, extractor)?,
    })
}
