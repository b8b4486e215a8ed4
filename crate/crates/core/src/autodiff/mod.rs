//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! its backward rule needs. Node ids are assigned in recording order, so
//! inputs always precede outputs and [`Tape::backward`] simply walks the
//! nodes from the loss down to 0.
//!
//! ```
//! use dcn::autodiff::Tape;
//! use dcn::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod gradcheck;

use std::sync::atomic::{AtomicU64, Ordering};

pub use gradcheck::{
    compare_gradients, finite_difference_gradient, grad_check, numeric_gradients, relative_error,
    GradCheckReport,
};

use crate::competition::{self, CompetitionConfig, PROB_FLOOR};
use crate::error::{param_err, shape_err, Error, Result};
use crate::layers::{self, BatchNormForm, BatchNormSaved, ConvGeometry, SigmoidForm};
use crate::tensor::{Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Relu(usize),
    Sigmoid(usize, SigmoidForm),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: usize,
        dims: (usize, usize, usize, usize),
    },
    BatchNormTrain {
        input: usize,
        gamma: usize,
        beta: usize,
        form: BatchNormForm,
        saved: BatchNormSaved<T>,
    },
    ChannelAffine {
        input: usize,
        scale: Vec<T>,
    },
    Dropout {
        input: usize,
        mask: Vec<T>,
    },
    SegmentMean {
        input: usize,
        row_of_pixel: Vec<usize>,
        counts: Vec<usize>,
    },
    ClassDistances {
        features: usize,
        codebook: usize,
        config: CompetitionConfig,
    },
    SoftminCrossEntropy {
        distances: usize,
        probs: Vec<[T; 2]>,
        truth: Vec<u8>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Relu(_) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample_nearest2",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Dropout { .. } => "dropout",
            Op::SegmentMean { .. } => "segment_mean",
            Op::ClassDistances { .. } => "class_distances",
            Op::SoftminCrossEntropy { .. } => "softmin_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::Sigmoid(a, _) => vec![a],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![input, kernel, bias],
            Op::BatchNormTrain {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input, .. }
            | Op::ChannelAffine { input, .. }
            | Op::Dropout { input, .. }
            | Op::SegmentMean { input, .. } => vec![input],
            Op::ClassDistances {
                features, codebook, ..
            } => vec![features, codebook],
            Op::SoftminCrossEntropy { distances, .. } => vec![distances],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One recorded operation: its name, input node ids and output node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Batch-normalization statistics produced by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
pub struct Tape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records of every node in recording order.
    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Record {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: i,
            })
            .collect()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "node {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("var from another tape");
        &self.nodes[v.index].value
    }

    /// Places a tensor on the tape. It receives a gradient iff
    /// [`Tensor::requires_grad`] is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    fn var(&self, index: usize) -> Var {
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn binary(&mut self, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(shape_err!("operands have shapes {sa:?} and {sb:?}"));
        }
        Ok((ia, ib))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        self.push(v, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y)?;
        self.push(v, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        self.push(v, Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x * c);
        self.push(v, Op::Scale(ia, c))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        self.push(v, Op::Sum(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = layers::relu(&self.nodes[ia].value);
        self.push(v, Op::Relu(ia))
    }

    pub fn sigmoid(&mut self, a: Var, form: SigmoidForm) -> Result<Var> {
        let ia = self.check(a)?;
        let v = layers::sigmoid(&self.nodes[ia].value, form);
        self.push(v, Op::Sigmoid(ia, form))
    }

    // ── layers ──────────────────────────────────────────────────────

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ii, ik, ib) = (self.check(input)?, self.check(kernel)?, self.check(bias)?);
        let x = &self.nodes[ii].value;
        let k = &self.nodes[ik].value;
        let geom = ConvGeometry::new(x, k)?;
        self.nodes[ib].value.expect_shape(&[geom.c_out])?;
        let out = layers::conv2d_forward_raw(&geom, x.data(), k.data(), self.nodes[ib].value.data());
        let v = Tensor::new(&layers::with_channels(x.shape(), geom.c_out), out)?;
        self.push(
            v,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                bias: ib,
                geom,
            },
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let ii = self.check(input)?;
        let (v, argmax) = layers::maxpool2(&self.nodes[ii].value)?;
        self.push(v, Op::MaxPool2 { input: ii, argmax })
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let ii = self.check(input)?;
        let dims = self.nodes[ii].value.nhwc()?;
        let v = layers::upsample_nearest2(&self.nodes[ii].value)?;
        self.push(v, Op::Upsample2 { input: ii, dims })
    }

    /// Training-mode batch normalization over every axis but the last.
    /// Returns the normalized output and the batch statistics so the caller
    /// can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
        form: BatchNormForm,
    ) -> Result<(Var, BatchStats<T>)> {
        let (ii, ig, ibt) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let x = &self.nodes[ii].value;
        let c = *x.shape().last().expect("tensors have rank >= 1");
        if x.len() == c && x.rank() < 2 {
            return Err(shape_err!("batch norm needs a batch axis"));
        }
        self.nodes[ig].value.expect_shape(&[c])?;
        self.nodes[ibt].value.expect_shape(&[c])?;
        if !(epsilon >= 0.0) {
            return Err(param_err!("batch-norm epsilon must be >= 0"));
        }
        let (y, saved) = layers::batch_norm_train_raw(
            x.data(),
            c,
            self.nodes[ig].value.data(),
            self.nodes[ibt].value.data(),
            epsilon,
            form,
        );
        let stats = BatchStats {
            mean: saved.mean.clone(),
            var: saved.var.clone(),
        };
        let v = Tensor::new(x.shape(), y)?;
        let out = self.push(
            v,
            Op::BatchNormTrain {
                input: ii,
                gamma: ig,
                beta: ibt,
                form,
                saved,
            },
        )?;
        Ok((out, stats))
    }

    /// `y = scale[c] * x + shift[c]` with constant per-channel coefficients.
    /// Inference-mode batch normalization reduces to this.
    pub fn channel_affine(&mut self, input: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        let c = *x.shape().last().expect("tensors have rank >= 1");
        if scale.len() != c || shift.len() != c {
            return Err(shape_err!("affine coefficients must have {c} entries"));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| scale[i % c] * v + shift[i % c])
            .collect();
        let v = Tensor::new(x.shape(), data)?;
        self.push(v, Op::ChannelAffine { input: ii, scale })
    }

    /// Multiplies by an inverted-dropout mask drawn from `seed`.
    pub fn dropout(&mut self, input: Var, rate: f64, seed: u64) -> Result<Var> {
        let ii = self.check(input)?;
        layers::DropoutLayer::new(rate, seed)?;
        let x = &self.nodes[ii].value;
        let mask = layers::dropout_mask::<T>(x.len(), rate, seed);
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(x.shape(), data)?;
        self.push(v, Op::Dropout { input: ii, mask })
    }

    /// Averages pixel vectors by segment.
    ///
    /// `input` is `[.., d]` with `P` pixels; `row_of_pixel[p]` names the
    /// output row of pixel `p`. Output is `[rows, d]` and every row must
    /// receive at least one pixel.
    pub fn segment_mean(&mut self, input: Var, row_of_pixel: Vec<usize>, rows: usize) -> Result<Var> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        let d = *x.shape().last().expect("tensors have rank >= 1");
        if row_of_pixel.len() * d != x.len() {
            return Err(shape_err!(
                "{} pixel assignments for {} pixels",
                row_of_pixel.len(),
                x.len() / d
            ));
        }
        let mut counts = vec![0usize; rows];
        let mut sums = vec![T::zero(); rows * d];
        for (p, &r) in row_of_pixel.iter().enumerate() {
            if r >= rows {
                return Err(shape_err!("segment {r} out of range {rows}"));
            }
            counts[r] += 1;
            for j in 0..d {
                sums[r * d + j] = sums[r * d + j] + x.data()[p * d + j];
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(param_err!("segment {empty} is empty"));
        }
        for (r, &c) in counts.iter().enumerate() {
            let c = T::of(c as f64);
            for v in &mut sums[r * d..(r + 1) * d] {
                *v = *v / c;
            }
        }
        let v = Tensor::new(&[rows, d], sums)?;
        self.push(
            v,
            Op::SegmentMean {
                input: ii,
                row_of_pixel,
                counts,
            },
        )
    }

    /// Distances of every row of `features` (`[rows, D]`) to both rows of
    /// `codebook` (`[2, D]`), giving `[rows, 2]`.
    pub fn class_distances(&mut self, features: Var, codebook: Var, config: CompetitionConfig) -> Result<Var> {
        let (ifx, icb) = (self.check(features)?, self.check(codebook)?);
        let x = &self.nodes[ifx].value;
        let w = &self.nodes[icb].value;
        let [rows, dim] = *x.shape() else {
            return Err(shape_err!("features must be [rows, D], got {:?}", x.shape()));
        };
        w.expect_shape(&[2, dim])?;
        let d = competition::distances_forward(x.data(), w.data(), dim, config);
        let v = Tensor::new(&[rows, 2], d)?;
        self.push(
            v,
            Op::ClassDistances {
                features: ifx,
                codebook: icb,
                config,
            },
        )
    }

    /// Weighted mean cross-entropy of softmin probabilities over a
    /// `[rows, 2]` distance matrix. Scalar output.
    pub fn softmin_cross_entropy(&mut self, distances: Var, truth: &[u8], weights: Option<&[T]>) -> Result<Var> {
        let id = self.check(distances)?;
        let d = &self.nodes[id].value;
        let [rows, 2] = *d.shape() else {
            return Err(shape_err!("distances must be [rows, 2], got {:?}", d.shape()));
        };
        competition::validate_targets(rows, truth, weights)?;
        let probs = competition::softmin_rows(d.data());
        let loss = competition::competition_loss(&probs, truth, weights)?;
        let weights = weights.map_or_else(|| vec![T::one(); rows], <[T]>::to_vec);
        self.push(
            Tensor::scalar(loss),
            Op::SoftminCrossEntropy {
                distances: id,
                probs,
                truth: truth.to_vec(),
                weights,
            },
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Gradients of a scalar `loss` with respect to every node that
    /// requires one.
    ///
    /// Nodes are visited in exact reverse recording order, so repeated calls
    /// give bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of node {i} ({}) element {j}",
                    node.op.name()
                )));
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || i == il {
                grads[i] = Some(g);
            }
        }

        let values = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                let is_leaf = matches!(node.op, Op::Leaf);
                match g {
                    Some(g) if is_leaf || i == il => Some(
                        Tensor::new(node.value.shape(), g).expect("gradient matches node shape"),
                    ),
                    None if is_leaf && node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            values,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let value = |j: usize| self.nodes[j].value.data();
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut send = |j: usize, d: Vec<T>| {
            if wants(j) {
                accumulate(&mut grads[j], d);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                send(a, g.iter().zip(value(b)).map(|(&d, &y)| d * y).collect());
                send(b, g.iter().zip(value(a)).map(|(&d, &x)| d * x).collect());
            }
            &Op::Scale(a, c) => send(a, g.iter().map(|&d| d * c).collect()),
            &Op::Sum(a) => send(a, vec![g[0]; value(a).len()]),
            &Op::Relu(a) => send(
                a,
                g.iter()
                    .zip(value(a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            &Op::Sigmoid(a, form) => send(
                a,
                g.iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(&d, &s)| d * layers::logistic_grad(s, form))
                    .collect(),
            ),
            &Op::Conv2d {
                input,
                kernel,
                bias,
                ref geom,
            } => {
                let (dx, dk, db) = layers::conv2d_backward_raw(geom, value(input), value(kernel), g);
                send(input, dx);
                send(kernel, dk);
                send(bias, db);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); value(*input).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + d;
                }
                send(*input, dx);
            }
            &Op::Upsample2 {
                input,
                dims: (n, h, w, c),
            } => send(input, layers::upsample_nearest2_backward(g, n, h, w, c)),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                form,
                saved,
            } => {
                let c = saved.mean.len();
                let (dx, dg, db) =
                    layers::batch_norm_train_backward(saved, g, c, value(*gamma), *form);
                send(*input, dx);
                if *form == BatchNormForm::Standard {
                    send(*gamma, dg);
                    send(*beta, db);
                }
            }
            Op::ChannelAffine { input, scale } => {
                let c = scale.len();
                send(
                    *input,
                    g.iter().enumerate().map(|(k, &d)| d * scale[k % c]).collect(),
                );
            }
            Op::Dropout { input, mask } => {
                send(*input, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::SegmentMean {
                input,
                row_of_pixel,
                counts,
            } => {
                let d = g.len() / counts.len();
                let inv: Vec<T> = counts.iter().map(|&c| T::one() / T::of(c as f64)).collect();
                let mut dx = Vec::with_capacity(row_of_pixel.len() * d);
                for &r in row_of_pixel {
                    dx.extend(g[r * d..(r + 1) * d].iter().map(|&v| v * inv[r]));
                }
                send(*input, dx);
            }
            &Op::ClassDistances {
                features,
                codebook,
                config,
            } => {
                let dim = self.nodes[codebook].value.shape()[1];
                let (df, dw) =
                    competition::distances_backward(value(features), value(codebook), dim, config, g);
                send(features, df);
                send(codebook, dw);
            }
            Op::SoftminCrossEntropy {
                distances,
                probs,
                truth,
                weights,
            } => {
                let wsum: T = weights.iter().copied().sum();
                let floor = T::of(PROB_FLOOR);
                let mut dd = Vec::with_capacity(probs.len() * 2);
                for ((p, &t), &w) in probs.iter().zip(truth).zip(weights) {
                    let scale = g[0] * w / wsum;
                    // At the floor the loss is locally constant.
                    let active = p[t as usize] > floor;
                    for (k, &pk) in p.iter().enumerate() {
                        let onehot = if k == t as usize { T::one() } else { T::zero() };
                        dd.push(if active { scale * (onehot - pk) } else { T::zero() });
                    }
                }
                send(*distances, dd);
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, d: Vec<T>) {
    match slot {
        None => *slot = Some(d),
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a = *a + b;
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
///
/// Holds an entry for the loss itself and for every leaf that requires a
/// gradient; leaves the loss does not depend on get zeros.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    values: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.values.get(v.index)?.as_ref()
    }

    /// Moves a gradient out of the map.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.values.get_mut(v.index)?.take()
    }

    /// `(node id, gradient)` pairs in node order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}
