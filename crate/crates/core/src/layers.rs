//! Convolution, pooling, upsampling, batch normalization, ReLU, sigmoid and
//! dropout.
//!
//! Every layer is available twice: as a plain forward function over
//! [`Tensor`]s (this module) and as a differentiable operation on a
//! [`Tape`](crate::autodiff::Tape). The tape operations call the kernels
//! defined here, so both paths compute identical values.
//!
//! Activations use the `[n, h, w, c]` (or `[h, w, c]`) layout throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Training mode enables batch statistics and dropout; inference uses the
/// running statistics and passes dropout through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Which logistic function to use.
///
/// `Standard` is `1 / (1 + e^-x)` and is increasing. `Literal` is
/// `1 / (1 + e^x)`, the mirror image, and is decreasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmoidForm {
    #[default]
    Standard,
    Literal,
}

/// `Standard` divides the centered input by `sqrt(var + eps)` and applies a
/// learnable affine map. `Literal` divides by `var + eps` and has no affine
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchNormForm {
    #[default]
    Standard,
    Literal,
}

// ── sigmoid / relu ──────────────────────────────────────────────────

/// Overflow-safe logistic function.
pub fn logistic<T: Real>(x: T, form: SigmoidForm) -> T {
    let x = match form {
        SigmoidForm::Standard => x,
        SigmoidForm::Literal => -x,
    };
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Derivative of [`logistic`] expressed through its output `s`.
pub fn logistic_grad<T: Real>(s: T, form: SigmoidForm) -> T {
    let d = s * (T::one() - s);
    match form {
        SigmoidForm::Standard => d,
        SigmoidForm::Literal => -d,
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>, form: SigmoidForm) -> Tensor<T> {
    input.map(|x| logistic(x, form))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

// ── convolution ─────────────────────────────────────────────────────

/// Same-padded, stride-1 cross-correlation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer<T = f32> {
    /// `[k_h, k_w, c_in, c_out]`
    pub kernel: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
}

impl<T: Real> Conv2dLayer<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        ConvGeometry::of_kernel(&kernel)?;
        let c_out = kernel.shape()[3];
        bias.expect_shape(&[c_out])?;
        Ok(Self { kernel, bias })
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[3]
    }
}

/// Sizes shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeometry {
    fn of_kernel<T: Real>(kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let [kh, kw, c_in, c_out] = *kernel.shape() else {
            return Err(shape_err!(
                "kernel must be [k_h, k_w, c_in, c_out], got {:?}",
                kernel.shape()
            ));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(param_err!("kernel size {kh}x{kw} must be odd"));
        }
        Ok((kh, kw, c_in, c_out))
    }

    pub fn new<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Self> {
        let (n, h, w, c) = input.nhwc()?;
        let (kh, kw, c_in, c_out) = Self::of_kernel(kernel)?;
        if c != c_in {
            return Err(shape_err!(
                "input has {c} channels, kernel expects {c_in}"
            ));
        }
        Ok(Self {
            n,
            h,
            w,
            kh,
            kw,
            c_in,
            c_out,
        })
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.c_in
    }

    fn out_len(&self) -> usize {
        self.h * self.w * self.c_out
    }

    /// Input pixel aligned with output pixel `(oy, ox)` under kernel tap
    /// `(ky, kx)`, or `None` when it falls in the zero padding.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy + ky).checked_sub(self.kh / 2)?;
        let ix = (ox + kx).checked_sub(self.kw / 2)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

pub(crate) fn conv2d_forward_raw<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(input.par_chunks(g.in_len()))
        .for_each(|(out, x)| conv_sample(g, x, kernel, bias, out));
    out
}

fn conv_sample<T: Real>(g: &ConvGeometry, x: &[T], kernel: &[T], bias: &[T], out: &mut [T]) {
    let (c_in, c_out) = (g.c_in, g.c_out);
    for oy in 0..g.h {
        for ox in 0..g.w {
            let acc = &mut out[(oy * g.w + ox) * c_out..][..c_out];
            acc.copy_from_slice(bias);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some(p) = g.tap(oy, ox, ky, kx) else {
                        continue;
                    };
                    let xin = &x[p * c_in..][..c_in];
                    let wtap = &kernel[(ky * g.kw + kx) * c_in * c_out..][..c_in * c_out];
                    for (ci, &xv) in xin.iter().enumerate() {
                        let wrow = &wtap[ci * c_out..][..c_out];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to input, kernel and bias.
///
/// Per-sample kernel gradients are computed independently and summed in
/// sample order, so the result does not depend on the thread count.
pub(crate) fn conv2d_backward_raw<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k_len = kernel.len();
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .par_chunks(g.in_len())
        .zip(grad_out.par_chunks(g.out_len()))
        .map(|(x, dy)| conv_sample_backward(g, x, kernel, dy))
        .collect();

    let mut dx = Vec::with_capacity(input.len());
    let mut dk = vec![T::zero(); k_len];
    let mut db = vec![T::zero(); g.c_out];
    for (dxs, dks, dbs) in per_sample {
        dx.extend_from_slice(&dxs);
        for (a, b) in dk.iter_mut().zip(&dks) {
            *a = *a + *b;
        }
        for (a, b) in db.iter_mut().zip(&dbs) {
            *a = *a + *b;
        }
    }
    (dx, dk, db)
}

fn conv_sample_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (c_in, c_out) = (g.c_in, g.c_out);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); c_out];
    for oy in 0..g.h {
        for ox in 0..g.w {
            let dyv = &dy[(oy * g.w + ox) * c_out..][..c_out];
            for (a, &b) in db.iter_mut().zip(dyv) {
                *a = *a + b;
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some(p) = g.tap(oy, ox, ky, kx) else {
                        continue;
                    };
                    let base = (ky * g.kw + kx) * c_in * c_out;
                    let xin = &x[p * c_in..][..c_in];
                    let dxin = &mut dx[p * c_in..][..c_in];
                    for ci in 0..c_in {
                        let wrow = &kernel[base + ci * c_out..][..c_out];
                        let mut dot = T::zero();
                        for (&wv, &d) in wrow.iter().zip(dyv) {
                            dot = dot + wv * d;
                        }
                        dxin[ci] = dxin[ci] + dot;

                        let xv = xin[ci];
                        let dkrow = &mut dk[base + ci * c_out..][..c_out];
                        for (a, &d) in dkrow.iter_mut().zip(dyv) {
                            *a = *a + xv * d;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Same-padded convolution plus bias. Output spatial size equals the input's.
pub fn conv2d<T: Real>(input: &Tensor<T>, layer: &Conv2dLayer<T>) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, &layer.kernel)?;
    let out = conv2d_forward_raw(&g, input.data(), layer.kernel.data(), layer.bias.data());
    Tensor::new(&with_channels(input.shape(), g.c_out), out)
}

pub(crate) fn with_channels(shape: &[usize], c: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 3") = c;
    s
}

// ── pooling / upsampling ────────────────────────────────────────────

/// 2x2 max pooling with stride 2.
///
/// Returns the pooled tensor and, for every output element, the flat index
/// of the input element that won. Ties go to the lowest flat index.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, h, w, c) = input.nhwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("max pooling needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    // Window visited in increasing flat-index order; strict `>`
                    // keeps the first maximum.
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if best == usize::MAX || x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = oh;
    shape[r - 2] = ow;
    Ok((Tensor::new(&shape, out)?, argmax))
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample_nearest2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = input.nhwc()?;
    let x = input.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((s * h + oy / 2) * w + ox / 2) * c;
                let dst = ((s * oh + oy) * ow + ox) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = oh;
    shape[r - 2] = ow;
    Tensor::new(&shape, out)
}

/// Sums each 2x2 block of a `[n, 2h, 2w, c]` gradient back to `[n, h, w, c]`.
pub(crate) fn upsample_nearest2_backward<T: Real>(
    grad_out: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * h * w * c];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((s * h + oy / 2) * w + ox / 2) * c;
                let src = ((s * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    dx[dst + ch] = dx[dst + ch] + grad_out[src + ch];
                }
            }
        }
    }
    dx
}

// ── batch normalization ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
    pub form: BatchNormForm,
}

impl<T: Real> BatchNormLayer<T> {
    /// Fresh layer: `gamma = 1`, `beta = 0`, running mean 0, running var 1,
    /// `epsilon = 1e-5`, `momentum = 0.9`.
    pub fn new(channels: usize, form: BatchNormForm) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            epsilon: 1e-5,
            momentum: 0.9,
            form,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(param_err!("batch-norm epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(param_err!("batch-norm running variance is negative"));
        }
        Ok(())
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::of(self.momentum);
        let rest = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = m * *r + rest * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = m * *r + rest * b;
        }
    }
}

/// Values a training-mode batch normalization keeps for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchNormSaved<T> {
    /// Centered input, same layout as the input.
    pub centered: Vec<T>,
    /// Per-channel divisor reciprocal: `(var+eps)^-1/2` or `(var+eps)^-1`.
    pub scale: Vec<T>,
    /// Per-channel derivative of `scale` with respect to the variance.
    pub dscale: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn bn_scale<T: Real>(var: T, eps: f64, form: BatchNormForm) -> (T, T) {
    let v = var + T::of(eps);
    match form {
        BatchNormForm::Standard => {
            let s = T::one() / v.sqrt();
            (s, -T::of(0.5) * s / v)
        }
        BatchNormForm::Literal => {
            let s = T::one() / v;
            (s, -s * s)
        }
    }
}

/// Normalizes with the batch's own per-channel statistics (biased variance).
pub(crate) fn batch_norm_train_raw<T: Real>(
    x: &[T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    form: BatchNormForm,
) -> (Vec<T>, BatchNormSaved<T>) {
    let count = T::of((x.len() / c) as f64);
    let mut mean = vec![T::zero(); c];
    for px in x.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);

    let centered: Vec<T> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v - mean[i % c])
        .collect();
    let mut var = vec![T::zero(); c];
    for px in centered.chunks(c) {
        for (s, &v) in var.iter_mut().zip(px) {
            *s = *s + v * v;
        }
    }
    var.iter_mut().for_each(|s| *s = *s / count);

    let (scale, dscale): (Vec<T>, Vec<T>) = var.iter().map(|&v| bn_scale(v, eps, form)).unzip();
    let y = centered
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            let z = v * scale[ch];
            match form {
                BatchNormForm::Standard => gamma[ch] * z + beta[ch],
                BatchNormForm::Literal => z,
            }
        })
        .collect();
    (
        y,
        BatchNormSaved {
            centered,
            scale,
            dscale,
            mean,
            var,
        },
    )
}

/// Gradients of [`batch_norm_train_raw`] with respect to input, gamma, beta.
pub(crate) fn batch_norm_train_backward<T: Real>(
    saved: &BatchNormSaved<T>,
    grad_out: &[T],
    c: usize,
    gamma: &[T],
    form: BatchNormForm,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::of((grad_out.len() / c) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    // Gradient with respect to the normalized value, before the affine map.
    let dz: Vec<T> = grad_out
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let ch = i % c;
            match form {
                BatchNormForm::Standard => {
                    dgamma[ch] = dgamma[ch] + g * saved.centered[i] * saved.scale[ch];
                    dbeta[ch] = dbeta[ch] + g;
                    g * gamma[ch]
                }
                BatchNormForm::Literal => g,
            }
        })
        .collect();

    let mut sum_dz = vec![T::zero(); c];
    let mut sum_dz_xc = vec![T::zero(); c];
    for (i, &d) in dz.iter().enumerate() {
        let ch = i % c;
        sum_dz[ch] = sum_dz[ch] + d;
        sum_dz_xc[ch] = sum_dz_xc[ch] + d * saved.centered[i];
    }
    let two = T::of(2.0);
    let dx = dz
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let ch = i % c;
            saved.scale[ch] * (d - sum_dz[ch] / count)
                + two / count * saved.centered[i] * saved.dscale[ch] * sum_dz_xc[ch]
        })
        .collect();
    (dx, dgamma, dbeta)
}

/// Per-channel affine map `y = a*x + b` equivalent to inference-mode
/// normalization with the running statistics.
pub(crate) fn batch_norm_infer_coeffs<T: Real>(layer: &BatchNormLayer<T>) -> (Vec<T>, Vec<T>) {
    (0..layer.channels())
        .map(|ch| {
            let (s, _) = bn_scale(layer.running_var.data()[ch], layer.epsilon, layer.form);
            let mean = layer.running_mean.data()[ch];
            match layer.form {
                BatchNormForm::Standard => {
                    let a = layer.gamma.data()[ch] * s;
                    (a, layer.beta.data()[ch] - a * mean)
                }
                BatchNormForm::Literal => (s, -s * mean),
            }
        })
        .unzip()
}

/// Batch normalization over every axis but the last.
///
/// In [`Phase::Train`] the batch statistics normalize the input and are
/// folded into the running statistics; in [`Phase::Infer`] the running
/// statistics are used and the layer is not modified.
pub fn batch_norm<T: Real>(
    batch: &Tensor<T>,
    layer: &mut BatchNormLayer<T>,
    phase: Phase,
) -> Result<Tensor<T>> {
    layer.validate()?;
    let c = *batch.shape().last().ok_or_else(|| shape_err!("empty shape"))?;
    if c != layer.channels() {
        return Err(shape_err!(
            "batch has {c} channels, layer has {}",
            layer.channels()
        ));
    }
    let out = match phase {
        Phase::Train => {
            let (y, saved) = batch_norm_train_raw(
                batch.data(),
                c,
                layer.gamma.data(),
                layer.beta.data(),
                layer.epsilon,
                layer.form,
            );
            layer.update_running(&saved.mean, &saved.var);
            y
        }
        Phase::Infer => {
            let (a, b) = batch_norm_infer_coeffs(layer);
            batch
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| a[i % c] * x + b[i % c])
                .collect()
        }
    };
    let out = Tensor::new(batch.shape(), out)?;
    out.ensure_finite("batch_norm output")?;
    Ok(out)
}

// ── dropout ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutLayer {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutLayer {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(param_err!("dropout rate must be in [0, 1), got {rate}"));
        }
        Ok(Self { rate, seed })
    }
}

/// Inverted-dropout multiplier mask: each entry is 0 with probability `rate`
/// and `1 / (1 - rate)` otherwise, drawn from a generator seeded by `seed`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    if rate == 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn dropout<T: Real>(input: &Tensor<T>, layer: &DropoutLayer, phase: Phase) -> Result<Tensor<T>> {
    DropoutLayer::new(layer.rate, layer.seed)?;
    match phase {
        Phase::Infer => Ok(input.clone()),
        Phase::Train => {
            let mask = dropout_mask::<T>(input.len(), layer.rate, layer.seed);
            let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::new(input.shape(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    /// Quadruple-loop reference convolution.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let [h, w, ci] = *x.shape() else { unreachable!() };
        let [kh, kw, _, co] = *k.shape() else { unreachable!() };
        let mut out = vec![0.0; h * w * co];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for o in 0..co {
                    let mut acc = b.data()[o];
                    for dy in 0..kh as isize {
                        for dx in 0..kw as isize {
                            let iy = y + dy - kh as isize / 2;
                            let ix = xx + dx - kw as isize / 2;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                let xv = x.data()[(iy as usize * w + ix as usize) * ci + c];
                                let kv = k.data()[((dy as usize * kw + dx as usize) * ci + c) * co + o];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[(y as usize * w + xx as usize) * co + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[5, 6, 3], 1.0, &mut rng);
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let layer = Conv2dLayer::new(t(&[1, 1, 3, 3], &k), Tensor::zeros(&[3])).unwrap();
        assert_eq!(conv2d(&x, &layer).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let v = 2.5;
        let x = Tensor::<f64>::full(&[6, 6, 1], v);
        let layer = Conv2dLayer::new(Tensor::full(&[3, 3, 1, 1], 1.0), Tensor::zeros(&[1])).unwrap();
        let y = conv2d(&x, &layer).unwrap();
        for yy in 1..5 {
            for xx in 1..5 {
                assert_eq!(y.data()[yy * 6 + xx], 9.0 * v);
            }
        }
        // Corners see 4 taps under zero padding.
        assert_eq!(y.data()[0], 4.0 * v);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = Tensor::<f64>::randn(&[8, 8, 2], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[3, 3, 2, 4], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let expected = naive_conv(&x, &k, &b);
            let layer = Conv2dLayer::new(k.cast::<f32>(), b.cast::<f32>()).unwrap();
            let got = conv2d(&x.cast::<f32>(), &layer).unwrap();
            for (g, e) in got.data().iter().zip(&expected) {
                assert!((*g as f64 - e).abs() < 1e-5 * (1.0 + e.abs()), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_kernels() {
        assert!(Conv2dLayer::<f32>::new(Tensor::zeros(&[2, 2, 1, 1]), Tensor::zeros(&[1])).is_err());
        let layer = Conv2dLayer::<f32>::new(Tensor::zeros(&[3, 3, 2, 1]), Tensor::zeros(&[1])).unwrap();
        assert!(conv2d(&Tensor::zeros(&[4, 4, 3]), &layer).is_err());
    }

    #[test]
    fn maxpool_picks_max_and_breaks_ties_low() {
        let (y, idx) = maxpool2(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let (y, idx) = maxpool2(&Tensor::<f64>::full(&[4, 4, 1], 3.0)).unwrap();
        assert_eq!(y.data(), &[3.0; 4]);
        assert_eq!(idx, vec![0, 2, 8, 10]);

        assert!(maxpool2(&Tensor::<f64>::zeros(&[3, 4, 1])).is_err());
    }

    #[test]
    fn maxpool_output_dominates_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 6, 8, 3], 1.0, &mut rng);
        let (y, _) = maxpool2(&x).unwrap();
        for s in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    for c in 0..3 {
                        let o = y.data()[((s * 3 + oy) * 4 + ox) * 3 + c];
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((s * 6 + 2 * oy + dy) * 8 + 2 * ox + dx) * 3 + c;
                            assert!(o >= x.data()[i]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_replicates() {
        let y = upsample_nearest2(&t(&[1, 1, 1], &[5.0])).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[5.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[4, 4, 3], 1.0, &mut rng);
        let y = upsample_nearest2(&x).unwrap();
        assert_eq!(y.shape(), &[8, 8, 3]);
        assert_abs_diff_eq!(y.sum(), 4.0 * x.sum(), epsilon = 1e-12);

        let (p, _) = maxpool2(&y).unwrap();
        assert_eq!(upsample_nearest2(&p).unwrap().shape(), y.shape());
    }

    #[test]
    fn batch_norm_worked_values() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let mut std = BatchNormLayer::<f64>::new(1, BatchNormForm::Standard);
        let y = batch_norm(&x, &mut std, Phase::Train).unwrap();
        let expected = [-1.2247, 0.0, 1.2247];
        for (a, b) in y.data().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }

        let mut lit = BatchNormLayer::<f64>::new(1, BatchNormForm::Literal);
        lit.epsilon = 0.0;
        let y = batch_norm(&x, &mut lit, Phase::Train).unwrap();
        for (a, b) in y.data().iter().zip([-1.5, 0.0, 1.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }

        let mut lit = BatchNormLayer::<f64>::new(1, BatchNormForm::Literal);
        let y = batch_norm(&Tensor::full(&[4, 1], 7.0), &mut lit, Phase::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batch_norm_train_standardizes_and_tracks_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[4, 5, 5, 3], 3.0, &mut rng).map(|v| v + 2.0);
        let mut layer = BatchNormLayer::<f64>::new(3, BatchNormForm::Standard);
        let y = batch_norm(&x, &mut layer, Phase::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // Running mean moved 10% of the way toward the batch mean.
        assert!(layer.running_mean.data().iter().all(|&m| m > 0.0));

        let before = layer.clone();
        batch_norm(&x, &mut layer, Phase::Infer).unwrap();
        assert_eq!(before, layer);
    }

    #[test]
    fn batch_norm_rejects_negative_running_var() {
        let mut layer = BatchNormLayer::<f64>::new(1, BatchNormForm::Standard);
        layer.running_var.data_mut()[0] = -1.0;
        assert!(batch_norm(&Tensor::zeros(&[2, 1]), &mut layer, Phase::Infer).is_err());
    }

    #[test]
    fn relu_values() {
        let y = relu(&t(&[2], &[-3.0, 5.0]));
        assert_eq!(y.data(), &[0.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[100], 1.0, &mut rng);
        let s = relu(&x).zip_map(&relu(&x.map(|v| -v)), |a, b| a + b).unwrap();
        assert_eq!(s.data(), x.map(f64::abs).data());
    }

    #[test]
    fn sigmoid_forms() {
        for form in [SigmoidForm::Standard, SigmoidForm::Literal] {
            assert_eq!(logistic(0.0f64, form), 0.5);
        }
        assert_abs_diff_eq!(logistic(1.0f64, SigmoidForm::Literal), 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(logistic(1.0f64, SigmoidForm::Standard), 0.73106, epsilon = 1e-5);
        assert_eq!(logistic(1000.0f64, SigmoidForm::Standard), 1.0);
        assert_eq!(logistic(-1000.0f64, SigmoidForm::Standard), 0.0);

        let grid: Vec<f64> = (0..200).map(|i| -20.0 + 0.2 * i as f64).collect();
        for w in grid.windows(2) {
            assert!(logistic(w[1], SigmoidForm::Standard) > logistic(w[0], SigmoidForm::Standard));
            assert!(logistic(w[1], SigmoidForm::Literal) < logistic(w[0], SigmoidForm::Literal));
        }
    }

    #[test]
    fn dropout_behaviour() {
        let x = Tensor::<f64>::full(&[50], 1.0);
        let none = DropoutLayer::new(0.0, 1).unwrap();
        assert_eq!(dropout(&x, &none, Phase::Train).unwrap(), x);
        let half = DropoutLayer::new(0.5, 1).unwrap();
        assert_eq!(dropout(&x, &half, Phase::Infer).unwrap(), x);
        assert!(DropoutLayer::new(1.0, 1).is_err());

        let a = dropout(&x, &half, Phase::Train).unwrap();
        let b = dropout(&x, &half, Phase::Train).unwrap();
        assert_eq!(a, b);

        let ones = Tensor::<f64>::full(&[1], 1.0);
        let mut total = 0.0;
        for seed in 0..10_000 {
            let layer = DropoutLayer::new(0.5, seed).unwrap();
            total += dropout(&ones, &layer, Phase::Train).unwrap().data()[0];
        }
        assert!((total / 10_000.0 - 1.0).abs() < 0.05);
    }
}
