//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward passes; it never looks at a backward
//! rule, so it checks them independently. The probe loss is `Σ r_i y_i`
//! over the output `y` of the function under test, reduced in `f64` from the
//! `f32` outputs.

use alloc::vec::Vec;

use crate::autodiff::{GradTape, Var};
use crate::{Error, Result, Tensor};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Worst over inputs of `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Element-wise relative error with a floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe(y: &Tensor, r: &[f32]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Compares the gradient of `Σ r_i · build(inputs)_i` with respect to each
/// input against central differences with step `h`.
///
/// `build` receives a fresh tape and the input vars (registered as
/// parameters, in order) and returns the output node.
pub fn check<F>(inputs: &[Tensor], r: &[f32], h: f32, build: F) -> Result<GradCheck>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(probe(tape.value(out), r))
    };
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    if tape.shape(out).numel() != r.len() {
        return Err(Error::Dimension(alloc::format!(
            "{} probe weights for output {}",
            r.len(),
            tape.shape(out)
        )));
    }
    let loss = tape.weighted_sum(out, r.to_vec())?;
    tape.backward(loss)?;

    let mut res = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let n = t.shape().numel();
        let analytic: Vec<f64> =
            tape.grad(*v).map_or_else(|| alloc::vec![0.0; n], |g| g.iter().map(|x| *x as f64).collect());
        let mut numeric = alloc::vec![0f64; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            // the perturbation actually representable in f32
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            *slot = (up - down) / step;
        }
        let mut diff = 0f64;
        let mut scale = 0f64;
        for (a, nv) in analytic.iter().zip(&numeric) {
            diff = diff.max((a - nv).abs());
            scale = scale.max(a.abs()).max(nv.abs());
        }
        res.max_abs_err = res.max_abs_err.max(diff);
        if scale > 0.0 {
            res.max_rel_err = res.max_rel_err.max(diff / scale);
        }
        res.checked += n;
    }
    Ok(res)
}
