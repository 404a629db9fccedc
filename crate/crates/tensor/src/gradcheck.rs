//! Central finite-difference oracle for tape gradients.
//!
//! The error measure is `|analytic − numeric| / max(1, |numeric|)`, taken
//! elementwise; the checkers return the worst value seen.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const SEED: u64 = 0x0dd5_eed5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks `d f / d inputs`. `f` builds a scalar from leaves holding `inputs`.
///
/// Tapes are created in training mode with a fixed seed, so dropout masks
/// repeat across evaluations.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(true, SEED);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(true, SEED);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.wrt(*v).unwrap_or(&zero).clone();
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Checks the gradient of `f` with respect to every non-frozen parameter in `store`.
///
/// Returns the worst error together with the name of the parameter it came from.
pub fn check_param_gradients<F>(store: &ParamStore, eps: f64, f: F) -> Result<(f64, String)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(true, SEED);
        let out = f(&mut tape, s)?;
        Ok(tape.value(out).item())
    };

    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new(true, SEED);
    let out = f(&mut tape, &work)?;
    tape.backward(out).accumulate(&tape, &mut work);
    let analytic: Vec<Option<Tensor>> = work.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut worst = (0.0f64, String::new());
    let ids: Vec<_> = work.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if work.get(id).frozen {
            continue;
        }
        let n = work.get(id).value.len();
        for i in 0..n {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, work.get(id).name.clone());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_a_wrong_gradient() {
        // value = Σx², but report a gradient of x instead of 2x
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let worst = check_gradients(&[x], 1e-3, |tape, v| {
            let xs = tape.value(v[0]).clone();
            let val = xs.data().iter().map(|a| a * a).sum();
            tape.external_scalar(v[0], val, xs)
        })
        .unwrap();
        assert!(worst > 0.1);
    }
}
