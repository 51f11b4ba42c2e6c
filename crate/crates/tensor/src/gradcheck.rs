//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{invalid, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check(f, inputs, None)
}

/// Like [`grad_check`] but probes at most `per_input` randomly chosen
/// coordinates of each input (chosen deterministically from `seed`).
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], per_input: usize, seed: u64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check(f, inputs, Some((per_input, seed)))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::inference();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.len() != 1 {
        return Err(invalid("grad_check", format!("function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

fn check<F>(f: F, inputs: &[Tensor], sampling: Option<(usize, u64)>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let mut grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.take_or_zeros(v)).collect()
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sampling.map_or(0, |s| s.1));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = match sampling {
            Some((k, _)) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let a = grad.data()[idx];
            if !a.is_finite() {
                return Err(TensorError::NonFiniteGradient { input: which, index: idx });
            }
            let original = inputs[which].data()[idx];
            probe[which] = with_value(&inputs[which], idx, original + STEP);
            let plus = evaluate(&f, &probe)?;
            probe[which] = with_value(&inputs[which], idx, original - STEP);
            let minus = evaluate(&f, &probe)?;
            probe[which] = inputs[which].clone();
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((which, idx));
            }
        }
    }
    Ok(report)
}

fn with_value(t: &Tensor, idx: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[idx] = value;
    Tensor::new(t.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let report = grad_check(|_, v| Ok(v[0].square().sum()), &[x]).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coordinates_checked, 4);
    }

    #[test]
    fn detects_wrong_rule() {
        // a kernel whose backward rule is off by a factor of two
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let x = v[0].value();
                let out = x.map(|a| a * a);
                let saved = x.clone();
                let y = tape.custom("bad_square", &[v[0]], out, move |g, _| {
                    vec![Some(g.mul(&saved).unwrap())]
                });
                Ok(y.sum())
            },
            &[x],
        )
        .unwrap();
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_gradient_is_reported_with_coordinate() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let out = v[0].value().as_ref().clone();
                let y = tape.custom("nan_grad", &[v[0]], out, |g, _| {
                    let mut d = g.data().to_vec();
                    d[1] = f64::NAN;
                    vec![Some(Tensor::new(g.shape(), d).unwrap())]
                });
                Ok(y.sum())
            },
            &[x],
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { input: 0, index: 1 }));
    }
}
