//! Central finite-difference gradient checker.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, element by element. Returns the max over elements of
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::domain(format!(
            "grad_check step {step} outside [1e-6, 1e-3]"
        )));
    }
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x)?;
        let out = f(&mut tape, xv)?;
        if tape.data(out).len() != 1 {
            return Err(Error::shape(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                tape.shape(out)
            )));
        }
        tape.backward(out)?;
        tape.grad(xv).to_vec()
    };
    let eval = |pt: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(pt)?;
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out))
    };
    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Gradient check for stored parameters: compares the tape gradient of
/// `f(store)` against central differences at `coords` randomly sampled
/// coordinates of every trainable parameter. Returns the max relative error.
pub fn grad_check_store<F>(
    store: &mut super::ParamStore,
    f: F,
    step: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &super::ParamStore) -> Result<Var>,
{
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    store.zero_grads();
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        if tape.data(out).len() != 1 {
            return Err(Error::shape("grad_check_store requires a scalar output".to_string()));
        }
        tape.backward(out)?;
        tape.accumulate_param_grads(store)?;
        store
            .ids()
            .map(|id| store.get(id).grad.clone())
            .collect()
    };
    let eval = |store: &super::ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.value(out))
    };
    let mut max_rel = 0.0f64;
    for id in store.trainable_ids() {
        let n = store.get(id).numel();
        let grads = analytic[id.0]
            .as_ref()
            .ok_or_else(|| Error::domain(format!("no gradient for parameter {id:?}")))?
            .clone();
        for _ in 0..coords_per_param.min(n) {
            let i = rng.gen_range(0..n);
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + step;
            let fp = eval(store)?;
            store.get_mut(id).data[i] = orig - step;
            let fm = eval(store)?;
            store.get_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    store.zero_grads();
    Ok(max_rel)
}
