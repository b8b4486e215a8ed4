//! Central finite differences as an independent check on the tape.

use super::{Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over every element.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
///
/// `f` must return a single finite value.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !(h > 0.0) {
        return Err(param_err!("finite-difference step must be positive, got {h}"));
    }
    let mut eval = |x: &Tensor<f64>| -> Result<f64> {
        let y = f(x)?;
        if y.len() != 1 {
            return Err(shape_err!("function must be scalar, got shape {:?}", y.shape()));
        }
        let v = y.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// Element-wise comparison of two gradient sets.
pub fn compare_gradients(
    analytic: Vec<Tensor<f64>>,
    numeric: Vec<Tensor<f64>>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(tolerance > 0.0) {
        return Err(param_err!("tolerance must be positive, got {tolerance}"));
    }
    if analytic.len() != numeric.len() {
        return Err(shape_err!(
            "{} analytic vs {} numeric gradients",
            analytic.len(),
            numeric.len()
        ));
    }
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if a.shape() != n.shape() {
            return Err(shape_err!(
                "gradient {k}: analytic {:?} vs numeric {:?}",
                a.shape(),
                n.shape()
            ));
        }
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(x, y);
            if e > max_rel_error || e.is_nan() {
                max_rel_error = e;
                worst = Some((k, i));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        tolerance,
        passed: max_rel_error < tolerance,
        analytic,
        numeric,
    })
}

/// Checks the tape's gradients of a scalar function against finite
/// differences with step `h`.
///
/// `f` builds the computation on a fresh tape from leaves holding `inputs`;
/// it is called once for the analytic pass and twice per input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf requiring grad has a gradient"))
        .collect();

    let numeric = numeric_gradients(&f, inputs, h)?;
    compare_gradients(analytic, numeric, tolerance)
}

/// Finite-difference gradients of `f` with respect to each input in turn.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    (0..inputs.len())
        .map(|k| {
            finite_difference_gradient(
                |probe| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| tape.leaf(if j == k { probe.clone() } else { x.clone() }))
                        .collect();
                    let out = f(&mut tape, &vars)?;
                    Ok(tape.value(out).clone())
                },
                &inputs[k],
                h,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::SigmoidForm;
    use approx::assert_abs_diff_eq;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[data.len()], data).unwrap()
    }

    #[test]
    fn central_difference_of_square() {
        let g = finite_difference_gradient(
            |x| Ok(Tensor::scalar(x.data().iter().map(|v| v * v).sum())),
            &t(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_abs_diff_eq!(g.data()[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.data()[1], 4.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_gradient(|_| Ok(Tensor::scalar(3.0)), &t(&[1.0, 2.0, 3.0]), 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0; 3]);
    }

    #[test]
    fn logistic_slope_at_zero() {
        let g = finite_difference_gradient(
            |x| {
                let s: f64 = crate::layers::sigmoid(x, SigmoidForm::Standard).sum();
                Ok(Tensor::scalar(s))
            },
            &t(&[0.0]),
            1e-5,
        )
        .unwrap();
        assert_abs_diff_eq!(g.data()[0], 0.25, epsilon = 1e-9);
    }

    #[test]
    fn bad_functions_are_rejected() {
        assert!(finite_difference_gradient(|x| Ok(x.clone()), &t(&[1.0, 2.0]), 1e-5).is_err());
        assert!(finite_difference_gradient(|_| Ok(Tensor::scalar(f64::NAN)), &t(&[1.0]), 1e-5).is_err());
        assert!(finite_difference_gradient(|_| Ok(Tensor::scalar(0.0)), &t(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let r = compare_gradients(vec![t(&[1.0, 2.0])], vec![t(&[1.0])], 1e-4);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = t(&[0.3, -0.7, 1.1]);
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let s = tape.sigmoid(v[0], SigmoidForm::Standard)?;
            tape.sum(s)
        };
        let honest = grad_check(f, std::slice::from_ref(&x), 1e-5, 1e-4).unwrap();
        assert!(honest.passed);

        let corrupted: Vec<Tensor<f64>> = honest.analytic.iter().map(|g| g.map(|v| v * 1.01)).collect();
        let report = compare_gradients(corrupted, honest.numeric.clone(), 1e-4).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 1e-4);
    }
}
