//! The competition output layer.
//!
//! A [`Codebook`] holds one prototype vector per class (row 0 non-building,
//! row 1 building). Each superpixel embedding is compared against both
//! prototypes and the class at the smaller distance wins. Training goes
//! through [`softmin_probs`], whose argmax always coincides with [`winner`].

use crate::error::{param_err, shape_err, Error, Result};
use crate::layers::{logistic, logistic_grad, SigmoidForm};
use crate::tensor::{Real, Tensor};

/// Floor applied to the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// How the activation and the prototype difference are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceForm {
    /// `d_i = 1/2 * sum_j (sigmoid(x_j) - w_ij)^2`; zero at a perfect match.
    #[default]
    ActivatedDifference,
    /// `d_i = 1/2 * sum_j sigmoid(x_j - w_ij)^2`; never reaches zero.
    DifferenceActivated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompetitionConfig {
    pub form: DistanceForm,
    pub sigmoid: SigmoidForm,
}

/// Two class prototypes, `[2, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T = f32> {
    pub prototypes: Tensor<T>,
}

impl<T: Real> Codebook<T> {
    pub const CLASSES: usize = 2;

    pub fn new(prototypes: Tensor<T>) -> Result<Self> {
        match *prototypes.shape() {
            [2, _] => Ok(Self { prototypes }),
            _ => Err(shape_err!(
                "codebook must be [2, D], got {:?}",
                prototypes.shape()
            )),
        }
    }

    /// Non-building prototype at 0.25 everywhere, building prototype at 0.75.
    pub fn initial(dim: usize) -> Self {
        let mut data = vec![T::of(0.25); dim];
        data.extend(std::iter::repeat(T::of(0.75)).take(dim));
        Self {
            prototypes: Tensor::new(&[2, dim], data).expect("2 x dim values"),
        }
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn row(&self, class: usize) -> &[T] {
        let d = self.dim();
        &self.prototypes.data()[class * d..(class + 1) * d]
    }

    /// Keeps every entry in `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in self.prototypes.data_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
    }
}

/// Distances from one embedding to both prototypes. Always non-negative.
pub fn class_distances<T: Real>(
    feature: &[T],
    codebook: &Codebook<T>,
    config: CompetitionConfig,
) -> Result<[T; 2]> {
    if feature.len() != codebook.dim() {
        return Err(shape_err!(
            "feature has {} dims, codebook has {}",
            feature.len(),
            codebook.dim()
        ));
    }
    let d = distances_forward(feature, codebook.prototypes.data(), feature.len(), config);
    Ok([d[0], d[1]])
}

/// Index of the smaller distance; ties go to class 0.
pub fn winner<T: Real>(distances: [T; 2]) -> Result<usize> {
    if distances.iter().any(|d| d.is_nan()) {
        return Err(Error::NonFinite("distance is NaN".into()));
    }
    Ok(usize::from(distances[1] < distances[0]))
}

/// `p_i = exp(-d_i) / sum_j exp(-d_j)` computed relative to the smallest
/// distance, so the winning class gets exactly `exp(0)` before normalizing.
pub fn softmin_probs<T: Real>(distances: [T; 2]) -> [T; 2] {
    let m = distances[0].min(distances[1]);
    let e = distances.map(|d| (m - d).exp());
    let z = e[0] + e[1];
    [e[0] / z, e[1] / z]
}

/// Class with the larger probability; ties go to class 0 as in [`winner`].
pub fn most_probable<T: Real>(probs: [T; 2]) -> usize {
    usize::from(probs[1] > probs[0])
}

/// Weighted mean of `-ln p_truth`. Without weights every row counts once.
pub fn competition_loss<T: Real>(
    probs: &[[T; 2]],
    truth: &[u8],
    weights: Option<&[T]>,
) -> Result<T> {
    validate_targets(probs.len(), truth, weights)?;
    let floor = T::of(PROB_FLOOR);
    let mut total = T::zero();
    let mut wsum = T::zero();
    for (r, (p, &t)) in probs.iter().zip(truth).enumerate() {
        let w = weights.map_or(T::one(), |w| w[r]);
        total = total - w * p[t as usize].max(floor).ln();
        wsum = wsum + w;
    }
    Ok(total / wsum)
}

pub(crate) fn validate_targets<T: Real>(
    rows: usize,
    truth: &[u8],
    weights: Option<&[T]>,
) -> Result<()> {
    if rows == 0 {
        return Err(param_err!("competition loss over zero rows"));
    }
    if truth.len() != rows {
        return Err(shape_err!("{} truth labels for {rows} rows", truth.len()));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t > 1) {
        return Err(param_err!("truth label {bad} is not binary"));
    }
    if let Some(w) = weights {
        if w.len() != rows {
            return Err(shape_err!("{} weights for {rows} rows", w.len()));
        }
        if w.iter().any(|&x| !(x >= T::zero())) || w.iter().copied().sum::<T>() <= T::zero() {
            return Err(param_err!("weights must be non-negative with a positive sum"));
        }
    }
    Ok(())
}

// ── batched kernels used by the tape ────────────────────────────────

/// Distances for `rows` embeddings of width `dim`; output is `[rows, 2]`.
pub(crate) fn distances_forward<T: Real>(
    features: &[T],
    prototypes: &[T],
    dim: usize,
    config: CompetitionConfig,
) -> Vec<T> {
    let half = T::of(0.5);
    let mut out = Vec::with_capacity(features.len() / dim * 2);
    for x in features.chunks(dim) {
        for class in 0..2 {
            let w = &prototypes[class * dim..(class + 1) * dim];
            let d: T = x
                .iter()
                .zip(w)
                .map(|(&xj, &wj)| match config.form {
                    DistanceForm::ActivatedDifference => {
                        let r = logistic(xj, config.sigmoid) - wj;
                        r * r
                    }
                    DistanceForm::DifferenceActivated => {
                        let s = logistic(xj - wj, config.sigmoid);
                        s * s
                    }
                })
                .sum();
            out.push(half * d);
        }
    }
    out
}

/// Returns `(d features, d prototypes)` given the gradient of the `[rows, 2]`
/// distance matrix.
pub(crate) fn distances_backward<T: Real>(
    features: &[T],
    prototypes: &[T],
    dim: usize,
    config: CompetitionConfig,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dfeat = vec![T::zero(); features.len()];
    let mut dproto = vec![T::zero(); prototypes.len()];
    for (r, x) in features.chunks(dim).enumerate() {
        for class in 0..2 {
            let g = grad_out[r * 2 + class];
            let w = &prototypes[class * dim..(class + 1) * dim];
            for j in 0..dim {
                // d/dx of the j-th term; d/dw is its negative in the
                // difference form and -(residual) in the activated form.
                let (dx, dw) = match config.form {
                    DistanceForm::ActivatedDifference => {
                        let s = logistic(x[j], config.sigmoid);
                        let res = s - w[j];
                        (res * logistic_grad(s, config.sigmoid), -res)
                    }
                    DistanceForm::DifferenceActivated => {
                        let s = logistic(x[j] - w[j], config.sigmoid);
                        let v = s * logistic_grad(s, config.sigmoid);
                        (v, -v)
                    }
                };
                dfeat[r * dim + j] = dfeat[r * dim + j] + g * dx;
                dproto[class * dim + j] = dproto[class * dim + j] + g * dw;
            }
        }
    }
    (dfeat, dproto)
}

/// Row probabilities of a `[rows, 2]` distance matrix.
pub(crate) fn softmin_rows<T: Real>(distances: &[T]) -> Vec<[T; 2]> {
    distances
        .chunks(2)
        .map(|d| softmin_probs([d[0], d[1]]))
        .collect()
}
