//! The encoder-decoder network with a superpixel competition output.
//!
//! Five encoder blocks (two 3x3 conv + batch norm + ReLU, then 2x2 max
//! pooling) shrink the tile by 32; five decoder blocks (nearest 2x upsample,
//! one 3x3 conv + batch norm + ReLU) restore it. A 1x1 head maps each pixel
//! to a `D`-dim embedding, embeddings are averaged per superpixel, and each
//! superpixel goes to the class whose prototype is nearer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::competition::{self, Codebook, CompetitionConfig, DistanceForm};
use crate::error::{param_err, shape_err, Result};
use crate::layers::{batch_norm_infer_coeffs, BatchNormForm, BatchNormLayer, Conv2dLayer, Phase, SigmoidForm};
use crate::superpixel::{broadcast_labels, SuperpixelMap};
use crate::tensor::{Real, Tensor};

pub const BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DcnConfig {
    pub input_channels: usize,
    /// Output channels of encoder blocks 0..5; the decoder mirrors them.
    pub block_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    /// Encoder blocks whose pooled output passes through dropout.
    pub dropout_blocks: Vec<usize>,
    pub competition: CompetitionConfig,
    pub batch_norm: BatchNormForm,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for DcnConfig {
    fn default() -> Self {
        Self {
            input_channels: 6,
            block_channels: vec![32, 64, 128, 256, 512],
            embedding_dim: 16,
            dropout_rate: 0.5,
            dropout_blocks: vec![3, 4],
            competition: CompetitionConfig::default(),
            batch_norm: BatchNormForm::Standard,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            tile_size: 128,
            seed: 0,
        }
    }
}

impl DcnConfig {
    /// Small network used by the harness tests: channels `[8, 16, 32, 64, 128]`, `D = 8`.
    pub fn reduced(tile_size: usize) -> Self {
        Self {
            block_channels: vec![8, 16, 32, 64, 128],
            embedding_dim: 8,
            tile_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != BLOCKS {
            return Err(param_err!(
                "block_channels needs exactly {BLOCKS} entries, got {}",
                self.block_channels.len()
            ));
        }
        if self.input_channels == 0 || self.embedding_dim == 0 || self.block_channels.contains(&0) {
            return Err(param_err!("channel counts must be positive"));
        }
        if self.tile_size == 0 || self.tile_size % (1 << BLOCKS) != 0 {
            return Err(param_err!(
                "tile size {} is not a positive multiple of {}",
                self.tile_size,
                1 << BLOCKS
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(param_err!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if let Some(b) = self.dropout_blocks.iter().find(|&&b| b >= BLOCKS) {
            return Err(param_err!("dropout block {b} does not exist"));
        }
        if !(self.bn_epsilon >= 0.0 && self.bn_epsilon.is_finite()) {
            return Err(param_err!("batch-norm epsilon must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(param_err!("batch-norm momentum must be in [0, 1]"));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let sigmoid = match self.competition.sigmoid {
            SigmoidForm::Standard => "standard",
            SigmoidForm::Literal => "literal",
        };
        let distance = match self.competition.form {
            DistanceForm::ActivatedDifference => "activated_difference",
            DistanceForm::DifferenceActivated => "difference_activated",
        };
        let bn = match self.batch_norm {
            BatchNormForm::Standard => "standard",
            BatchNormForm::Literal => "literal",
        };
        [
            format!("input_channels={}", self.input_channels),
            format!("block_channels={}", list(&self.block_channels)),
            format!("embedding_dim={}", self.embedding_dim),
            format!("dropout_rate={:?}", self.dropout_rate),
            format!("dropout_blocks={}", list(&self.dropout_blocks)),
            format!("sigmoid={sigmoid}"),
            format!("distance={distance}"),
            format!("batch_norm={bn}"),
            format!("bn_epsilon={:?}", self.bn_epsilon),
            format!("bn_momentum={:?}", self.bn_momentum),
            format!("tile_size={}", self.tile_size),
            format!("seed={}", self.seed),
        ]
        .join("\n")
    }

    /// Reads the keys written by [`to_text`](Self::to_text); other keys are
    /// ignored and missing keys keep their defaults.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            let bad = || crate::Error::Format(format!("bad config value {k}={v:?}"));
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let list = |s: &str| -> Result<Vec<usize>> {
                s.split(',').filter(|p| !p.is_empty()).map(|p| p.parse().map_err(|_| bad())).collect()
            };
            match k {
                "input_channels" => c.input_channels = num(v)?,
                "block_channels" => c.block_channels = list(v)?,
                "embedding_dim" => c.embedding_dim = num(v)?,
                "dropout_rate" => c.dropout_rate = real(v)?,
                "dropout_blocks" => c.dropout_blocks = list(v)?,
                "sigmoid" => {
                    c.competition.sigmoid = match v {
                        "standard" => SigmoidForm::Standard,
                        "literal" => SigmoidForm::Literal,
                        _ => return Err(bad()),
                    }
                }
                "distance" => {
                    c.competition.form = match v {
                        "activated_difference" => DistanceForm::ActivatedDifference,
                        "difference_activated" => DistanceForm::DifferenceActivated,
                        _ => return Err(bad()),
                    }
                }
                "batch_norm" => {
                    c.batch_norm = match v {
                        "standard" => BatchNormForm::Standard,
                        "literal" => BatchNormForm::Literal,
                        _ => return Err(bad()),
                    }
                }
                "bn_epsilon" => c.bn_epsilon = real(v)?,
                "bn_momentum" => c.bn_momentum = real(v)?,
                "tile_size" => c.tile_size = num(v)?,
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Number of trainable scalars, from the layer shapes alone.
    pub fn param_count(&self) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        let bn = |c: usize| match self.batch_norm {
            BatchNormForm::Standard => 2 * c,
            BatchNormForm::Literal => 0,
        };
        let ch = &self.block_channels;
        let mut n = 0;
        let mut cin = self.input_channels;
        for &c in ch {
            n += conv(3, cin, c) + bn(c) + conv(3, c, c) + bn(c);
            cin = c;
        }
        for &c in ch.iter().rev() {
            n += conv(3, cin, c) + bn(c);
            cin = c;
        }
        n + conv(1, cin, self.embedding_dim) + 2 * self.embedding_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T = f32> {
    pub conv1: Conv2dLayer<T>,
    pub bn1: BatchNormLayer<T>,
    pub conv2: Conv2dLayer<T>,
    pub bn2: BatchNormLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T = f32> {
    pub conv: Conv2dLayer<T>,
    pub bn: BatchNormLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcnModel<T = f32> {
    config: DcnConfig,
    pub encoders: Vec<EncoderBlock<T>>,
    pub decoders: Vec<DecoderBlock<T>>,
    pub head: Conv2dLayer<T>,
    pub codebook: Codebook<T>,
}

/// Per-tile result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TileOutput<T> {
    /// `[S, 2]` distances to the non-building and building prototypes.
    pub distances: Tensor<T>,
    /// Winning class of each superpixel.
    pub classes: Vec<u8>,
    /// Winning class broadcast to every pixel, row-major.
    pub labels: Vec<u8>,
}

/// Handles produced by [`DcnModel::forward_on_tape`].
#[derive(Debug)]
pub struct TapeForward<T> {
    /// `[total superpixels, 2]` over the whole batch, tile by tile.
    pub distances: Var,
    /// First distance row of each tile, plus the total at the end.
    pub row_offsets: Vec<usize>,
    /// Batch statistics of every normalization layer in
    /// [`bn_layers`](DcnModel::bn_layers) order; empty in inference.
    pub bn_stats: Vec<BatchStats<T>>,
}

fn he_conv<T: Real>(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Conv2dLayer<T> {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    Conv2dLayer::new(Tensor::randn(&[k, k, cin, cout], std, rng), Tensor::zeros(&[cout])).expect("valid conv shape")
}

/// Seed of the dropout mask for one block at one training step.
fn dropout_seed(seed: u64, block: usize, step: u64) -> u64 {
    seed ^ (block as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Real> DcnModel<T> {
    /// Fresh model: He-normal kernels, zero biases, unit/zero batch norm,
    /// codebook at 0.25 / 0.75, all drawn deterministically from the seed.
    pub fn build(config: DcnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bn = |c| {
            let mut l = BatchNormLayer::new(c, config.batch_norm);
            l.epsilon = config.bn_epsilon;
            l.momentum = config.bn_momentum;
            l
        };
        let mut cin = config.input_channels;
        let mut encoders = Vec::with_capacity(BLOCKS);
        for &c in &config.block_channels {
            encoders.push(EncoderBlock {
                conv1: he_conv(&mut rng, 3, cin, c),
                bn1: bn(c),
                conv2: he_conv(&mut rng, 3, c, c),
                bn2: bn(c),
            });
            cin = c;
        }
        let mut decoders = Vec::with_capacity(BLOCKS);
        for &c in config.block_channels.iter().rev() {
            decoders.push(DecoderBlock {
                conv: he_conv(&mut rng, 3, cin, c),
                bn: bn(c),
            });
            cin = c;
        }
        let head = he_conv(&mut rng, 1, cin, config.embedding_dim);
        let codebook = Codebook::initial(config.embedding_dim);
        Ok(Self {
            config,
            encoders,
            decoders,
            head,
            codebook,
        })
    }

    pub fn config(&self) -> &DcnConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn affine(&self) -> bool {
        self.config.batch_norm == BatchNormForm::Standard
    }

    /// Batch-norm layers in forward order.
    pub fn bn_layers(&self) -> Vec<&BatchNormLayer<T>> {
        let mut v = Vec::new();
        for e in &self.encoders {
            v.push(&e.bn1);
            v.push(&e.bn2);
        }
        v.extend(self.decoders.iter().map(|d| &d.bn));
        v
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        let mut v = Vec::new();
        for e in &mut self.encoders {
            v.push(&mut e.bn1);
            v.push(&mut e.bn2);
        }
        v.extend(self.decoders.iter_mut().map(|d| &mut d.bn));
        v
    }

    /// Trainable tensors with unique names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let affine = self.affine();
        let mut v = Vec::new();
        fn conv<'a, T>(v: &mut Vec<(String, &'a Tensor<T>)>, name: String, c: &'a Conv2dLayer<T>) {
            v.push((format!("{name}.kernel"), &c.kernel));
            v.push((format!("{name}.bias"), &c.bias));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            conv(&mut v, format!("enc{i}.conv1"), &e.conv1);
            if affine {
                v.push((format!("enc{i}.bn1.gamma"), &e.bn1.gamma));
                v.push((format!("enc{i}.bn1.beta"), &e.bn1.beta));
            }
            conv(&mut v, format!("enc{i}.conv2"), &e.conv2);
            if affine {
                v.push((format!("enc{i}.bn2.gamma"), &e.bn2.gamma));
                v.push((format!("enc{i}.bn2.beta"), &e.bn2.beta));
            }
        }
        for (i, d) in self.decoders.iter().enumerate() {
            conv(&mut v, format!("dec{i}.conv"), &d.conv);
            if affine {
                v.push((format!("dec{i}.bn.gamma"), &d.bn.gamma));
                v.push((format!("dec{i}.bn.beta"), &d.bn.beta));
            }
        }
        conv(&mut v, "head".into(), &self.head);
        v.push(("codebook".into(), &self.codebook.prototypes));
        v
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let affine = self.affine();
        let mut v = Vec::new();
        for e in &mut self.encoders {
            v.push(&mut e.conv1.kernel);
            v.push(&mut e.conv1.bias);
            if affine {
                v.push(&mut e.bn1.gamma);
                v.push(&mut e.bn1.beta);
            }
            v.push(&mut e.conv2.kernel);
            v.push(&mut e.conv2.bias);
            if affine {
                v.push(&mut e.bn2.gamma);
                v.push(&mut e.bn2.beta);
            }
        }
        for d in &mut self.decoders {
            v.push(&mut d.conv.kernel);
            v.push(&mut d.conv.bias);
            if affine {
                v.push(&mut d.bn.gamma);
                v.push(&mut d.bn.beta);
            }
        }
        v.push(&mut self.head.kernel);
        v.push(&mut self.head.bias);
        v.push(&mut self.codebook.prototypes);
        v
    }

    /// Running batch-norm statistics, named like the parameters.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut names = Vec::new();
        for i in 0..self.encoders.len() {
            names.push(format!("enc{i}.bn1"));
            names.push(format!("enc{i}.bn2"));
        }
        names.extend((0..self.decoders.len()).map(|i| format!("dec{i}.bn")));
        names
            .into_iter()
            .zip(self.bn_layers())
            .flat_map(|(n, l)| {
                [
                    (format!("{n}.running_mean"), &l.running_mean),
                    (format!("{n}.running_var"), &l.running_var),
                ]
            })
            .collect()
    }

    /// Same order as [`buffers`](Self::buffers).
    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.bn_layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.running_mean, &mut l.running_var])
            .collect()
    }

    /// Folds batch statistics from a training forward pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let layers = self.bn_layers_mut();
        if stats.len() != layers.len() {
            return Err(shape_err!("{} batch statistics for {} layers", stats.len(), layers.len()));
        }
        for (l, s) in layers.into_iter().zip(stats) {
            l.update_running(&s.mean, &s.var);
        }
        Ok(())
    }

    /// Keeps the prototypes inside `[0, 1]` after an optimizer step.
    pub fn clamp_codebook(&mut self) {
        self.codebook.clamp_unit();
    }

    /// Element-type conversion of every tensor.
    pub fn cast<U: Real>(&self) -> DcnModel<U> {
        let conv = |c: &Conv2dLayer<T>| Conv2dLayer {
            kernel: c.kernel.cast(),
            bias: c.bias.cast(),
        };
        let bn = |b: &BatchNormLayer<T>| BatchNormLayer {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
            epsilon: b.epsilon,
            momentum: b.momentum,
            form: b.form,
        };
        DcnModel {
            config: self.config.clone(),
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderBlock {
                    conv1: conv(&e.conv1),
                    bn1: bn(&e.bn1),
                    conv2: conv(&e.conv2),
                    bn2: bn(&e.bn2),
                })
                .collect(),
            decoders: self
                .decoders
                .iter()
                .map(|d| DecoderBlock {
                    conv: conv(&d.conv),
                    bn: bn(&d.bn),
                })
                .collect(),
            head: conv(&self.head),
            codebook: Codebook {
                prototypes: self.codebook.prototypes.cast(),
            },
        }
    }

    /// Places every parameter on `tape`, in [`params`](Self::params) order.
    pub fn param_leaves(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| {
                let t = t.clone();
                tape.leaf(if requires_grad { t.with_grad() } else { t })
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize], maps: &[&SuperpixelMap]) -> Result<usize> {
        let c = &self.config;
        let [n, h, w, ch] = *shape else {
            return Err(shape_err!("input must be [n, h, w, c], got {shape:?}"));
        };
        if h != c.tile_size || w != c.tile_size || ch != c.input_channels {
            return Err(shape_err!(
                "input tiles are {h}x{w}x{ch}, model expects {}x{}x{}",
                c.tile_size,
                c.tile_size,
                c.input_channels
            ));
        }
        if maps.len() != n {
            return Err(shape_err!("{} superpixel maps for {n} tiles", maps.len()));
        }
        if let Some(m) = maps.iter().find(|m| m.width() != w || m.height() != h) {
            return Err(shape_err!(
                "superpixel map is {}x{}, tiles are {w}x{h}",
                m.width(),
                m.height()
            ));
        }
        Ok(n)
    }

    /// Records a batched forward pass on `tape`.
    ///
    /// `params` are the handles from [`param_leaves`](Self::param_leaves)
    /// (or substitutes with the same shapes). In [`Phase::Train`] the batch
    /// statistics normalize the activations and dropout uses masks derived
    /// from the config seed and `step`; in [`Phase::Infer`] the running
    /// statistics are used and dropout is the identity.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        maps: &[&SuperpixelMap],
        phase: Phase,
        step: u64,
    ) -> Result<TapeForward<T>> {
        let n = self.check_input(tape.value(input).shape(), maps)?;
        let expected = self.params().len();
        if params.len() != expected {
            return Err(shape_err!("{} parameter handles, model has {expected}", params.len()));
        }
        let affine = self.affine();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("length checked");
        let mut bn_stats = Vec::new();

        let mut norm = |tape: &mut Tape<T>, x: Var, layer: &BatchNormLayer<T>, gb: Option<(Var, Var)>| -> Result<Var> {
            match phase {
                Phase::Train => {
                    let (g, b) = match gb {
                        Some(gb) => gb,
                        None => (tape.leaf(layer.gamma.clone()), tape.leaf(layer.beta.clone())),
                    };
                    let (y, stats) = tape.batch_norm_train(x, g, b, layer.epsilon, layer.form)?;
                    bn_stats.push(stats);
                    Ok(y)
                }
                Phase::Infer => {
                    let mut layer = layer.clone();
                    if let Some((g, b)) = gb {
                        layer.gamma = tape.value(g).clone();
                        layer.beta = tape.value(b).clone();
                    }
                    let (a, b) = batch_norm_infer_coeffs(&layer);
                    tape.channel_affine(x, a, b)
                }
            }
        };

        let mut x = input;
        for (i, e) in self.encoders.iter().enumerate() {
            let (k, b) = (take(), take());
            let gb = affine.then(|| (take(), take()));
            x = tape.conv2d(x, k, b)?;
            x = norm(tape, x, &e.bn1, gb)?;
            x = tape.relu(x)?;
            let (k, b) = (take(), take());
            let gb = affine.then(|| (take(), take()));
            x = tape.conv2d(x, k, b)?;
            x = norm(tape, x, &e.bn2, gb)?;
            x = tape.relu(x)?;
            x = tape.maxpool2(x)?;
            if phase == Phase::Train && self.config.dropout_rate > 0.0 && self.config.dropout_blocks.contains(&i) {
                x = tape.dropout(x, self.config.dropout_rate, dropout_seed(self.config.seed, i, step))?;
            }
        }
        for d in &self.decoders {
            let (k, b) = (take(), take());
            let gb = affine.then(|| (take(), take()));
            x = tape.upsample_nearest2(x)?;
            x = tape.conv2d(x, k, b)?;
            x = norm(tape, x, &d.bn, gb)?;
            x = tape.relu(x)?;
        }
        let (k, b) = (take(), take());
        let emb = tape.conv2d(x, k, b)?;
        let codebook = take();

        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut row_of_pixel = Vec::with_capacity(n * self.config.tile_size * self.config.tile_size);
        let mut offset = 0;
        for m in maps {
            row_offsets.push(offset);
            row_of_pixel.extend(m.labels().iter().map(|&l| offset + l as usize));
            offset += m.count();
        }
        row_offsets.push(offset);
        let pooled = tape.segment_mean(emb, row_of_pixel, offset)?;
        let distances = tape.class_distances(pooled, codebook, self.config.competition)?;
        Ok(TapeForward {
            distances,
            row_offsets,
            bn_stats,
        })
    }

    /// Runs a batch of tiles `[n, h, w, c]` and returns one result per tile.
    ///
    /// The model is not modified; in [`Phase::Train`] the batch statistics
    /// are computed but discarded and dropout uses the masks of step 0.
    pub fn forward_batch(&self, tiles: &Tensor<T>, maps: &[&SuperpixelMap], phase: Phase) -> Result<Vec<TileOutput<T>>> {
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape, false);
        let input = tape.leaf(tiles.clone());
        let fw = self.forward_on_tape(&mut tape, &params, input, maps, phase, 0)?;
        let d = tape.value(fw.distances).data();
        maps.iter()
            .enumerate()
            .map(|(t, m)| {
                let rows = &d[fw.row_offsets[t] * 2..fw.row_offsets[t + 1] * 2];
                let classes = rows
                    .chunks(2)
                    .map(|r| competition::winner([r[0], r[1]]).map(|c| c as u8))
                    .collect::<Result<Vec<_>>>()?;
                Ok(TileOutput {
                    distances: Tensor::new(&[m.count(), 2], rows.to_vec())?,
                    labels: broadcast_labels(m, &classes)?,
                    classes,
                })
            })
            .collect()
    }

    /// One tile `[h, w, c]` through the network.
    pub fn forward(&self, tile: &Tensor<T>, map: &SuperpixelMap, phase: Phase) -> Result<TileOutput<T>> {
        let (_, h, w, c) = tile.nhwc()?;
        let batch = tile.clone().reshape(&[1, h, w, c])?;
        Ok(self.forward_batch(&batch, &[map], phase)?.remove(0))
    }
}
