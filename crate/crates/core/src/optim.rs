//! The ADAM optimizer.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub params: AdamParams,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `shapes`.
    pub fn new<'a>(params: AdamParams, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<_> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            params,
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected ADAM update.
///
/// `names` label the parameters in error messages. A non-finite gradient
/// aborts before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(shape_err!(
            "{} parameters, {} gradients, {} moment slots, {} names",
            params.len(),
            grads.len(),
            state.m.len(),
            names.len()
        ));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        g.expect_shape(p.shape())
            .map_err(|e| shape_err!("gradient of {name}: {e}"))?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name} is not finite")));
        }
    }
    state.t += 1;
    let h = state.params;
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let c1 = T::of(1.0 - h.beta1.powf(state.t as f64));
    let c2 = T::of(1.0 - h.beta2.powf(state.t as f64));
    let (lr, eps) = (T::of(h.lr), T::of(h.epsilon));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (T::one() - b1) * g;
        }
        let v = state.v[i].data_mut();
        for (v, &g) in v.iter_mut().zip(g) {
            *v = b2 * *v + (T::one() - b2) * g * g;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((p, &m), &v) in p.data_mut().iter_mut().zip(m).zip(v) {
            *p = *p - lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap();
        let orig = p.clone();
        let mut s = AdamState::new(AdamParams::default(), [p.shape()]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &names(1), &mut s).unwrap();
        assert_eq!(p, orig);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_f64(&[2], &[0.5, -1.0]).unwrap();
        let mut s = AdamState::new(AdamParams::default(), [p.shape()]);
        adam_step(&mut [&mut p], &[Tensor::full(&[2], 1.0)], &names(1), &mut s).unwrap();
        assert!((p.data()[0] - (0.5 - 1e-3)).abs() < 1e-6);
        assert!((p.data()[1] - (-1.0 - 1e-3)).abs() < 1e-6);
        assert!(s.v[0].data().iter().all(|&v| v >= 0.0));
    }

    /// Reference update written directly from the moment recurrences.
    #[test]
    fn matches_scalar_recurrence() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let mut p = Tensor::<f64>::scalar(0.1);
        let mut s = AdamState::new(AdamParams::default(), [p.shape()]);
        let (mut x, mut m, mut v) = (0.1f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&mut [&mut p], &[Tensor::scalar(g)], &names(1), &mut s).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let mut s = AdamState::new(AdamParams::default(), [p.shape()]);
        let err = adam_step(&mut [&mut p], &[Tensor::scalar(f32::NAN)], &["head.bias".into()], &mut s).unwrap_err();
        assert!(err.to_string().contains("head.bias"));
        assert_eq!(s.t, 0);
        assert_eq!(p.data()[0], 1.0);
    }
}
